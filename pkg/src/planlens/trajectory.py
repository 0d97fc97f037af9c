"""Trajectories, samples, execution outcomes and generation-level statistics.

The data model mirrors how evolutionary program search is evaluated: a
trajectory is a generation-indexed population of program samples, each
sample carries up to k execution records, and an execution is graded on
the ordered criteria Failed < Compiled < Pass < Fast. Generation-level
rates count a sample as successful if any of its first k executions
reaches the criterion (pass@k-style, with the generation kept as the
unit of aggregation).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import threading
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Any, Iterable, Iterator, Mapping

FAST_SPEEDUP_THRESHOLD = 1.0  # strictly greater counts as fast; ties do not


class MalformedRecordError(ValueError):
    """An ExecutionRecord violates its invariants (upstream evaluator bug)."""


class GenerationNotFoundError(KeyError):
    """The requested generation index does not exist in the store."""


class StoreFormatError(ValueError):
    """A trajectory file could not be parsed; carries the record position."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class OutcomeLevel(IntEnum):
    """Ordered execution criteria; each level implies all lower ones."""

    FAILED = 0
    COMPILED = 1
    PASS = 2
    FAST = 3

    @classmethod
    def parse(cls, name: str) -> "OutcomeLevel":
        return cls[name.upper()]


# Metric names accepted wherever a generation-level rate is selected.
METRICS = ("compiled", "pass", "fast", "overall")


@dataclass(frozen=True)
class ExecutionRecord:
    """One execution attempt of a candidate program.

    Invariants (checked by `classify_execution`): validations_passed
    implies compiled, and a speedup may only be present when validations
    passed.
    """

    compiled: bool
    validations_passed: bool = False
    speedup_vs_baseline: float | None = None
    wall_time: float | None = None
    raw_logs: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {
            "compiled": self.compiled,
            "validations_passed": self.validations_passed,
            "speedup_vs_baseline": self.speedup_vs_baseline,
            "wall_time": self.wall_time,
            "raw_logs": list(self.raw_logs),
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ExecutionRecord":
        return cls(
            compiled=bool(data["compiled"]),
            validations_passed=bool(data.get("validations_passed", False)),
            speedup_vs_baseline=data.get("speedup_vs_baseline"),
            wall_time=data.get("wall_time"),
            raw_logs=tuple(data.get("raw_logs", ())),
        )


def classify_execution(rec: ExecutionRecord) -> OutcomeLevel:
    """Grade one execution with the highest satisfied criterion."""
    if rec.validations_passed and not rec.compiled:
        raise MalformedRecordError("validations_passed requires compiled")
    if rec.speedup_vs_baseline is not None:
        if not rec.validations_passed:
            raise MalformedRecordError("speedup requires validations_passed")
        if rec.speedup_vs_baseline <= 0:
            raise MalformedRecordError("speedup must be positive")
    if not rec.compiled:
        return OutcomeLevel.FAILED
    if not rec.validations_passed:
        return OutcomeLevel.COMPILED
    if (
        rec.speedup_vs_baseline is not None
        and rec.speedup_vs_baseline > FAST_SPEEDUP_THRESHOLD
    ):
        return OutcomeLevel.FAST
    return OutcomeLevel.PASS


@dataclass(frozen=True)
class Sample:
    """A frozen program sample within a generation."""

    sample_id: str
    generation_index: int
    program_text: str = ""
    parent_id: str | None = None
    executions: tuple[ExecutionRecord, ...] = ()
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def with_execution(self, rec: ExecutionRecord) -> "Sample":
        """Return a copy with one more execution appended."""
        return replace(self, executions=self.executions + (rec,))

    def to_json(self, trajectory_id: str | None = None) -> dict[str, Any]:
        data: dict[str, Any] = {
            "sample_id": self.sample_id,
            "generation_index": self.generation_index,
            "parent_id": self.parent_id,
            "program_text": self.program_text,
            "executions": [e.to_json() for e in self.executions],
            "metadata": dict(self.metadata),
        }
        if trajectory_id is not None:
            data["trajectory_id"] = trajectory_id
        return data

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "Sample":
        return cls(
            sample_id=str(data["sample_id"]),
            generation_index=int(data["generation_index"]),
            parent_id=data.get("parent_id"),
            program_text=data.get("program_text", ""),
            executions=tuple(
                ExecutionRecord.from_json(e) for e in data.get("executions", ())
            ),
            metadata=dict(data.get("metadata", {})),
        )


def sample_best_outcome(sample: Sample, k: int | None = None) -> OutcomeLevel:
    """Best outcome over the sample's first k executions (all when k is None).

    An empty execution list scores Failed; missing executions are not
    imputed.
    """
    records = sample.executions if k is None else sample.executions[:k]
    best = OutcomeLevel.FAILED
    for rec in records:
        level = classify_execution(rec)
        if level > best:
            best = level
    return best


def _canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class GenerationCheckpoint:
    """Immutable snapshot of one generation; interventions never mutate it."""

    trajectory_id: str
    g: int
    samples: tuple[Sample, ...]
    cached_references: tuple[str, ...] = ()

    @property
    def checkpoint_hash(self) -> str:
        payload = {
            "trajectory_id": self.trajectory_id,
            "g": self.g,
            "samples": [s.to_json() for s in self.samples],
            "references": list(self.cached_references),
        }
        return hashlib.sha256(_canonical_json(payload).encode()).hexdigest()

    def sample_ids(self) -> tuple[str, ...]:
        return tuple(s.sample_id for s in self.samples)


@dataclass(frozen=True)
class GenerationStats:
    """Generation-level success rates under a fixed retry budget k.

    `empty` flags a generation with no samples, for which all rates are
    defined as zero. `rate_overall` is the fraction of samples reaching
    at least Pass (the payoff used for overall-success games); under the
    cumulative criteria it coincides with `rate_pass`.
    """

    g: int
    rate_compiled: float
    rate_pass: float
    rate_fast: float
    rate_overall: float
    k: int
    n_samples: int
    empty: bool = False

    def rate_for(self, metric: str) -> float:
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        if metric == "overall":
            return self.rate_overall
        return getattr(self, f"rate_{metric}")


def generation_stats(cp: GenerationCheckpoint, k: int) -> GenerationStats:
    """Compute pass@k-style rates over a checkpoint's samples."""
    if k < 1:
        raise ValueError("retry budget k must be >= 1")
    n = len(cp.samples)
    if n == 0:
        return GenerationStats(cp.g, 0.0, 0.0, 0.0, 0.0, k, 0, empty=True)
    bests = [sample_best_outcome(s, k) for s in cp.samples]
    n_compiled = sum(1 for b in bests if b >= OutcomeLevel.COMPILED)
    n_pass = sum(1 for b in bests if b >= OutcomeLevel.PASS)
    n_fast = sum(1 for b in bests if b >= OutcomeLevel.FAST)
    return GenerationStats(
        g=cp.g,
        rate_compiled=n_compiled / n,
        rate_pass=n_pass / n,
        rate_fast=n_fast / n,
        rate_overall=n_pass / n,
        k=k,
        n_samples=n,
    )


def stats_from_outcomes(
    g: int, outcomes: Iterable[OutcomeLevel], k: int
) -> GenerationStats:
    """Build GenerationStats from per-sample best outcomes.

    The fold over outcomes is a commutative monoid: any aggregation order
    yields the same stats. Used by the pipeline's online fan-in.
    """
    levels = list(outcomes)
    n = len(levels)
    if n == 0:
        return GenerationStats(g, 0.0, 0.0, 0.0, 0.0, k, 0, empty=True)
    n_compiled = sum(1 for b in levels if b >= OutcomeLevel.COMPILED)
    n_pass = sum(1 for b in levels if b >= OutcomeLevel.PASS)
    n_fast = sum(1 for b in levels if b >= OutcomeLevel.FAST)
    return GenerationStats(
        g, n_compiled / n, n_pass / n, n_fast / n, n_pass / n, k, n
    )


class TrajectoryStore:
    """Live, generation-indexed collection of samples.

    Single-writer/multi-reader: appends are serialized by a lock; all
    stored values are immutable, so concurrent readers are safe.
    """

    def __init__(self, trajectory_id: str, retry_budget: int | None = None):
        self.trajectory_id = trajectory_id
        self.retry_budget = retry_budget
        self._samples: dict[str, Sample] = {}
        self._generations: dict[int, list[str]] = {}
        self._references: dict[int, tuple[str, ...]] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._samples)

    def append(self, sample: Sample) -> None:
        with self._lock:
            if sample.sample_id in self._samples:
                raise ValueError(f"duplicate sample_id {sample.sample_id!r}")
            if sample.generation_index < 0:
                raise ValueError("generation_index must be non-negative")
            if sample.parent_id is not None:
                parent = self._samples.get(sample.parent_id)
                if parent is None:
                    raise ValueError(f"unknown parent {sample.parent_id!r}")
                if sample.generation_index != parent.generation_index + 1:
                    raise ValueError(
                        "child generation_index must be parent's + 1 "
                        f"(parent g={parent.generation_index}, "
                        f"child g={sample.generation_index})"
                    )
            if (
                self.retry_budget is not None
                and len(sample.executions) > self.retry_budget
            ):
                raise ValueError(
                    f"sample has {len(sample.executions)} executions, "
                    f"budget is {self.retry_budget}"
                )
            self._samples[sample.sample_id] = sample
            self._generations.setdefault(sample.generation_index, []).append(
                sample.sample_id
            )

    def get(self, sample_id: str) -> Sample:
        return self._samples[sample_id]

    def generations(self) -> list[int]:
        return sorted(self._generations)

    def samples_at(self, g: int) -> tuple[Sample, ...]:
        if g not in self._generations:
            raise GenerationNotFoundError(g)
        return tuple(self._samples[sid] for sid in self._generations[g])

    def set_references(self, g: int, reference_ids: Iterable[str]) -> None:
        self._references[g] = tuple(reference_ids)

    def freeze(self, g: int) -> GenerationCheckpoint:
        """Snapshot generation g; later appends do not affect the result."""
        if g not in self._generations:
            raise GenerationNotFoundError(g)
        return GenerationCheckpoint(
            trajectory_id=self.trajectory_id,
            g=g,
            samples=self.samples_at(g),
            cached_references=self._references.get(g, ()),
        )

    def iter_samples(self) -> Iterator[Sample]:
        for g in self.generations():
            yield from self.samples_at(g)

    # -- persistence: newline-delimited JSON, one record per sample -------

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for sample in self.iter_samples():
                fh.write(_canonical_json(sample.to_json(self.trajectory_id)))
                fh.write("\n")

    @classmethod
    def load(cls, path: str, retry_budget: int | None = None) -> "TrajectoryStore":
        store: TrajectoryStore | None = None
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise StoreFormatError(str(exc), lineno) from exc
                if "trajectory_id" not in data:
                    raise StoreFormatError("record lacks trajectory_id", lineno)
                if store is None:
                    store = cls(str(data["trajectory_id"]), retry_budget)
                elif data["trajectory_id"] != store.trajectory_id:
                    raise StoreFormatError(
                        f"trajectory_id mismatch {data['trajectory_id']!r}", lineno
                    )
                try:
                    store.append(Sample.from_json(data))
                except (KeyError, TypeError, ValueError) as exc:
                    raise StoreFormatError(str(exc), lineno) from exc
        if store is None:
            store = cls("empty", retry_budget)
        return store


def save_checkpoint(
    cp: GenerationCheckpoint, path: str, meta: Mapping[str, Any] | None = None
) -> None:
    """Write a checkpoint in trajectory format with a leading header record.

    `meta` (e.g. config hash, tool version) rides along in the header; it
    does not participate in the checkpoint's content hash.
    """
    with open(path, "w", encoding="utf-8") as fh:
        header: dict[str, Any] = {
            "checkpoint": {
                "trajectory_id": cp.trajectory_id,
                "g": cp.g,
                "reference_ids": list(cp.cached_references),
            }
        }
        if meta:
            header["meta"] = dict(meta)
        fh.write(_canonical_json(header) + "\n")
        for sample in cp.samples:
            fh.write(_canonical_json(sample.to_json(cp.trajectory_id)) + "\n")


def load_checkpoint(path: str) -> GenerationCheckpoint:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise StoreFormatError("empty checkpoint file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise StoreFormatError(str(exc), 1) from exc
    if "checkpoint" not in header:
        raise StoreFormatError("missing checkpoint header record", 1)
    meta = header["checkpoint"]
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            samples.append(Sample.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise StoreFormatError(str(exc), lineno) from exc
    return GenerationCheckpoint(
        trajectory_id=str(meta["trajectory_id"]),
        g=int(meta["g"]),
        samples=tuple(samples),
        cached_references=tuple(meta.get("reference_ids", ())),
    )


def stats_to_csv(stats: Iterable[GenerationStats], meta: str | None = None) -> str:
    """Render stats as CSV with columns (g, metric, rate, k, n_samples)."""
    buf = io.StringIO()
    if meta:
        buf.write(f"# {meta}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["g", "metric", "rate", "k", "n_samples"])
    for st in stats:
        for metric in METRICS:
            writer.writerow([st.g, metric, repr(st.rate_for(metric)), st.k, st.n_samples])
    return buf.getvalue()
