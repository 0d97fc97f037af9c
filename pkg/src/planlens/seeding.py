"""Deterministic seed derivation.

Every random draw in the package is keyed by content (a root seed plus a
label path), never by call order. This is what makes runs reproducible
across execution modes and event interleavings.
"""

from __future__ import annotations

import hashlib
import random

_SEP = b"\x1f"


def _digest(*parts: object) -> bytes:
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(_SEP)
    return h.digest()


def derive_seed(root: int, *labels: object) -> int:
    """Derive a child seed from a root seed and a label path."""
    return int.from_bytes(_digest(root, *labels), "big")


def hash_uniform(root: int, *labels: object) -> float:
    """Uniform draw in [0, 1) determined entirely by (root, labels)."""
    return int.from_bytes(_digest(root, *labels), "big") / 2.0**64


def rng_for(root: int, *labels: object) -> random.Random:
    """A `random.Random` seeded from (root, labels)."""
    return random.Random(derive_seed(root, *labels))
