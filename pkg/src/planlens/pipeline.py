"""Sample-centric, event-driven execution of feedback interventions.

A run replays one frozen generation checkpoint under one intervention
(coalition x representation x plan handling). Samples advance
independently: feedback construction triggers prompting, prompting fans
out to k evaluations, and evaluations fan in to an online, commutative
aggregation. Scheduling is an explicit simulated-clock event loop with
three policies (serial, stage-sync barriers, multi-async), so schedule
permutations are first-class and order independence is testable rather
than assumed.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping

from .agents import (
    AgentBundle,
    Candidate,
    GeneratorAttemptError,
    LatencyParams,
    MockBehavior,
    PlanArtifact,
    crash_record,
)
from .feedback import (
    ArtifactSource,
    Coalition,
    FeedbackArtifact,
    FeedbackComponent,
    PermutedArtifactSource,
    Report,
    Representation,
    build_report,
    default_components,
    dummy_plan,
)
from .seeding import derive_seed, hash_uniform, rng_for
from .trajectory import (
    ExecutionRecord,
    GenerationCheckpoint,
    GenerationStats,
    OutcomeLevel,
    classify_execution,
    stats_from_outcomes,
)

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT_VERSION = 1


class PipelineConfigError(ValueError):
    """The run was misconfigured; no work was started."""


class ReplayMismatchError(ValueError):
    """Replay archive does not match the submitted checkpoint."""


class PipelineStalledError(RuntimeError):
    """No event progress; carries a diagnostic dump of the run state."""

    def __init__(self, message: str, dump: str):
        super().__init__(f"{message}\n{dump}")
        self.dump = dump


class CheckpointMutatedError(RuntimeError):
    """A checkpoint's content hash changed across a run."""


class ExecutionMode(Enum):
    SERIAL = "serial"
    STAGE_SYNC = "stage-sync"
    MULTI_ASYNC = "multi-async"


class EventKind(Enum):
    SAMPLE_LOADED = "SampleLoaded"
    FEEDBACK_BUILT = "FeedbackBuilt"
    CANDIDATES_GENERATED = "CandidatesGenerated"
    EVAL_COMPLETED = "EvalCompleted"
    AGGREGATED = "Aggregated"


class Stage(IntEnum):
    ANLZ = 1
    GEN = 2
    EVAL = 3
    AGG = 4


_STAGE_EVENT = {
    Stage.ANLZ: EventKind.FEEDBACK_BUILT,
    Stage.GEN: EventKind.CANDIDATES_GENERATED,
    Stage.EVAL: EventKind.EVAL_COMPLETED,
    Stage.AGG: EventKind.AGGREGATED,
}


@dataclass(frozen=True)
class Event:
    kind: EventKind
    sample_id: str
    run_id: str
    payload: Mapping
    logical_time: int
    wall_time: float

    def to_json(self) -> dict:
        return {
            "kind": self.kind.value,
            "sample_id": self.sample_id,
            "run_id": self.run_id,
            "logical_time": self.logical_time,
            "wall_time": self.wall_time,
            "payload": dict(self.payload),
        }


@dataclass(frozen=True)
class PipelineConfig:
    generator_concurrency: int = 16  # LLM pool P, shared by ANLZ and GEN
    eval_concurrency: int = 32
    k: int = 5
    rounds: int = 1
    seed: int = 0
    execution_mode: ExecutionMode = ExecutionMode.MULTI_ASYNC
    schedule_seed: int | None = None  # randomizes multi-async tie-breaking
    queue_capacity: int = 256  # bound on the GEN -> EVAL queue
    watchdog_seconds: float = 60.0
    record_trace: bool = True

    def validate(self) -> None:
        if self.generator_concurrency < 1:
            raise PipelineConfigError("generator_concurrency must be >= 1")
        if self.eval_concurrency < 1:
            raise PipelineConfigError("eval_concurrency must be >= 1")
        if self.k < 1:
            raise PipelineConfigError("k must be >= 1")
        if self.rounds < 1:
            raise PipelineConfigError("rounds must be >= 1")
        if self.queue_capacity < self.k:
            raise PipelineConfigError(
                "queue_capacity must be >= k or prompting can never start"
            )


class PlanMode(Enum):
    SELF = "self"  # planner runs on the report
    NONE = "none"  # implicit planning: empty plan slot
    DUMMY = "dummy"  # fixed content-free template, planner bypassed
    INJECTED = "injected"  # a provided plan artifact replaces the planner


@dataclass(frozen=True)
class Intervention:
    coalition: Coalition = Coalition(0)
    representation: Representation = Representation.RAW
    plan_mode: PlanMode = PlanMode.SELF
    injected_plan: PlanArtifact | None = None
    permutation: Mapping[str, str] | None = None  # randomized-feedback donors

    def signature(self) -> str:
        perm = (
            tuple(sorted(self.permutation.items())) if self.permutation else ()
        )
        injected = (
            (self.injected_plan.producer_tag, self.injected_plan.text)
            if self.injected_plan
            else None
        )
        return str(
            (
                self.coalition.mask,
                self.representation.value,
                self.plan_mode.value,
                injected,
                perm,
            )
        )


def game_intervention(
    game: str,
    coalition: Coalition,
    components: tuple[FeedbackComponent, ...] | None = None,
    representation: Representation = Representation.RAW,
) -> Intervention:
    """Translate a game coalition into a pipeline intervention.

    ``components``: players ARE the feedback components; plans are always
    explicit. ``plan-feedback``: bit 0 toggles the full component set,
    bit 1 toggles explicit planning. ``plan-summary``: feedback is always
    present; bit 0 switches raw to summarized, bit 1 toggles planning.
    """
    components = components or default_components()
    full = Coalition.of(*components)
    if game == "components":
        return Intervention(coalition=coalition, representation=representation)
    if game == "plan-feedback":
        feedback_on = bool(coalition.mask & 1)
        plan_on = bool(coalition.mask & 2)
        return Intervention(
            coalition=full if feedback_on else Coalition(0),
            representation=representation,
            plan_mode=PlanMode.SELF if plan_on else PlanMode.NONE,
        )
    if game == "plan-summary":
        summary_on = bool(coalition.mask & 1)
        plan_on = bool(coalition.mask & 2)
        return Intervention(
            coalition=full,
            representation=(
                Representation.SUMMARIZED if summary_on else Representation.RAW
            ),
            plan_mode=PlanMode.SELF if plan_on else PlanMode.NONE,
        )
    raise PipelineConfigError(f"unknown game {game!r}")


@dataclass(frozen=True)
class Task:
    stage: Stage
    sample_index: int
    sample_id: str
    round_index: int
    attempt: int = -1

    def sort_key(self) -> tuple:
        return (self.sample_index, self.round_index, int(self.stage), self.attempt)


class Disposition(Enum):
    DUPLICATE = "duplicate"
    PENDING = "pending"
    ROUND_COMPLETE = "round_complete"


class FanIn:
    """Commutative per-sample fan-in state.

    Recording is idempotent (keyed by sample/round/attempt) and the final
    fold over best outcomes is order independent, so any interleaving of
    evaluation completions yields the same statistics.
    """

    def __init__(self, rounds: int):
        self.rounds = rounds
        self.outcomes: dict[str, dict[tuple[int, int], OutcomeLevel]] = {}
        self.notes: dict[str, list[str]] = {}
        self._pending: dict[tuple[str, int], int] = {}
        self._expected: set[tuple[str, int]] = set()

    def record_failure(
        self, sample_id: str, round_index: int, attempt: int, note: str
    ) -> None:
        self.outcomes.setdefault(sample_id, {})[(round_index, attempt)] = (
            OutcomeLevel.FAILED
        )
        self.notes.setdefault(sample_id, []).append(note)

    def expect_evals(self, sample_id: str, round_index: int, count: int) -> None:
        key = (sample_id, round_index)
        if key in self._expected:
            raise RuntimeError(f"round {key} already registered")
        self._expected.add(key)
        self._pending[key] = count

    def record_eval(
        self, sample_id: str, round_index: int, attempt: int, level: OutcomeLevel
    ) -> Disposition:
        key = (round_index, attempt)
        per_sample = self.outcomes.setdefault(sample_id, {})
        if key in per_sample:
            return Disposition.DUPLICATE
        per_sample[key] = level
        pending_key = (sample_id, round_index)
        self._pending[pending_key] -= 1
        if self._pending[pending_key] > 0:
            return Disposition.PENDING
        return Disposition.ROUND_COMPLETE

    def round_complete(self, sample_id: str, round_index: int) -> bool:
        return self._pending.get((sample_id, round_index), 1) == 0

    def best_outcome(self, sample_id: str) -> OutcomeLevel:
        levels = self.outcomes.get(sample_id, {}).values()
        return max(levels, default=OutcomeLevel.FAILED)


@dataclass
class _RoundState:
    report: Report | None = None
    plan: PlanArtifact | None = None
    candidates: dict[int, Candidate] = field(default_factory=dict)


class RunLedger:
    """All state owned by one run; runs never share per-sample state."""

    def __init__(
        self,
        run_id: str,
        checkpoint: GenerationCheckpoint,
        intervention: Intervention,
        config: PipelineConfig,
        seed: int,
        replay: "ReplayCache | None" = None,
    ):
        self.run_id = run_id
        self.checkpoint = checkpoint
        self.checkpoint_hash = checkpoint.checkpoint_hash
        self.intervention = intervention
        self.intervention_signature = intervention.signature()
        self.config = config
        self.seed = seed
        self.replay = replay
        self.samples_by_id = {s.sample_id: s for s in checkpoint.samples}
        self.fan_in = FanIn(config.rounds)
        self.rounds: dict[tuple[str, int], _RoundState] = {}
        self.sample_state: dict[str, str] = {}
        self.aggregated: set[str] = set()
        self.best_outcomes: dict[str, OutcomeLevel] = {}
        self.events: list[Event] = []
        self.event_counts: dict[EventKind, int] = {kind: 0 for kind in EventKind}
        self.cache: dict[str, dict] = {}  # stage_key -> payload, for archiving
        self.replay_hits = 0
        self.clock = 0.0
        self.stats: GenerationStats | None = None
        self.max_llm_inflight = 0
        self.max_gen_inflight = 0
        self.max_eval_queue = 0
        self.sample_spans: dict[str, list[tuple[float, float]]] = {}
        self._logical = itertools.count()
        # engine state
        self.ready: list[Task] = []
        self.running: list = []
        self._run_seq = itertools.count()
        self._results: dict[Task, tuple[dict, list[Task], float]] = {}
        self.done = False

    def emit(self, kind: EventKind, sample_id: str, payload: Mapping) -> Event:
        event = Event(
            kind=kind,
            sample_id=sample_id,
            run_id=self.run_id,
            payload=payload,
            logical_time=next(self._logical),
            wall_time=self.clock,
        )
        self.event_counts[kind] += 1
        if self.config.record_trace:
            self.events.append(event)
        return event

    def round_state(self, sample_id: str, round_index: int) -> _RoundState:
        return self.rounds.setdefault((sample_id, round_index), _RoundState())

    def stage_key(self, stage: Stage, sample_id: str, round_index: int, attempt: int = -1) -> str:
        return "%016x" % derive_seed(
            0,
            "stage",
            self.checkpoint_hash,
            self.intervention_signature,
            self.seed,
            self.config.k,
            self.config.rounds,
            stage.name,
            sample_id,
            round_index,
            attempt,
        )

    def dump(self) -> str:
        lines = [
            f"run {self.run_id} clock={self.clock:.3f}",
            f"ready={len(self.ready)} running={len(self.running)} "
            f"aggregated={len(self.aggregated)}/{len(self.checkpoint.samples)}",
        ]
        for sid, state in sorted(self.sample_state.items()):
            lines.append(f"  sample {sid}: {state}")
        return "\n".join(lines)


@dataclass(frozen=True)
class RunResult:
    run_id: str
    stats: GenerationStats
    trace: tuple[Event, ...]
    makespan: float
    event_counts: Mapping[EventKind, int]
    max_gen_inflight: int
    max_eval_queue: int
    programs: int
    sample_idle: Mapping[str, float]

    @property
    def programs_per_hour(self) -> float:
        if self.makespan <= 0:
            return float("inf") if self.programs else 0.0
        return self.programs / self.makespan * 3600.0


class LatencyModel:
    """Simulated task duration: mean + tail * Exp(1), keyed by task identity."""

    def __init__(self, seed: int = 0, params: Mapping[str, LatencyParams] | None = None):
        self.seed = seed
        self.params = dict(params or {})

    def duration(self, run_seed: int, task: Task) -> float:
        if task.stage is Stage.AGG:
            return 0.0
        p = self.params.get(task.stage.name.lower(), LatencyParams())
        u = hash_uniform(
            self.seed,
            "latency",
            run_seed,
            task.stage.name,
            task.sample_id,
            task.round_index,
            task.attempt,
        )
        return p.mean + p.tail * -math.log(1.0 - u)

    @classmethod
    def from_behavior(cls, behavior: MockBehavior) -> "LatencyModel":
        return cls(seed=behavior.seed, params=dict(behavior.latency))


DEFAULT_LATENCIES = {
    "anlz": LatencyParams(mean=2.0, tail=2.0),
    "gen": LatencyParams(mean=4.0, tail=3.0),
    "eval": LatencyParams(mean=1.0, tail=1.0),
}


class _SummaryCache:
    """Insert-once summaries keyed by raw artifact content hash."""

    def __init__(self):
        import threading

        self._lock = threading.Lock()
        self._store: dict[str, FeedbackArtifact] = {}

    def get_or_summarize(self, summarizer, artifact: FeedbackArtifact) -> FeedbackArtifact:
        key = artifact.content_hash
        with self._lock:
            cached = self._store.get(key)
        if cached is not None:
            return cached
        summary = summarizer.summarize([artifact])[0]
        with self._lock:
            return self._store.setdefault(key, summary)


class _RepresentationSource:
    """Serves the requested representation, deriving it from raw feedback.

    Formatted output is a local deterministic transform; summarized output
    goes through the summarizer agent exactly once per distinct raw
    artifact (content-addressed cache).
    """

    def __init__(self, inner: ArtifactSource, summarizer, cache: _SummaryCache):
        self._inner = inner
        self._summarizer = summarizer
        self._cache = cache

    def get(self, sample_id, component, representation):
        direct = self._inner.get(sample_id, component, representation)
        if direct is not None:
            return direct
        raw = self._inner.get(sample_id, component, Representation.RAW)
        if raw is None:
            return None
        if representation is Representation.RAW:
            return raw
        if representation is Representation.FORMATTED:
            return FeedbackArtifact(
                component=raw.component,
                representation=Representation.FORMATTED,
                payload=f"[{raw.component.name}] {raw.payload}",
                source_sample=raw.source_sample,
            )
        return self._cache.get_or_summarize(self._summarizer, raw)


class InterventionPipeline:
    """Executes intervention runs over frozen checkpoints.

    Multiple runs may be submitted and driven concurrently (one thread
    per run); per-run state lives in its ledger, and the shared pieces
    (agents, artifact source, summary cache) are safe for concurrent use.
    """

    def __init__(
        self,
        agents: AgentBundle,
        artifact_source: ArtifactSource,
        players: tuple[FeedbackComponent, ...] | None = None,
        config: PipelineConfig | None = None,
        latency_model: LatencyModel | None = None,
    ):
        import threading

        self.agents = agents
        self.artifact_source = artifact_source
        self.players = players or default_components()
        self.config = config or PipelineConfig()
        self.config.validate()
        self.latency_model = latency_model or LatencyModel(
            seed=self.config.seed, params=DEFAULT_LATENCIES
        )
        self._ledgers: dict[str, RunLedger] = {}
        self._active: set[str] = set()
        self._lock = threading.Lock()
        self._summary_cache = _SummaryCache()
        self._run_counter = itertools.count()

    # -- run lifecycle -------------------------------------------------------

    def set_agents(self, agents: AgentBundle) -> None:
        """Rebinding agents is rejected while any run is in flight."""
        with self._lock:
            if self._active:
                raise PipelineConfigError(
                    "agent configuration is frozen while runs are active"
                )
            self.agents = agents

    def submit(
        self,
        checkpoint: GenerationCheckpoint,
        intervention: Intervention,
        seed: int | None = None,
        replay: "ReplayCache | None" = None,
    ) -> str:
        self.agents.require_complete()
        max_mask = (1 << len(self.players)) - 1
        if intervention.coalition.mask > max_mask:
            raise PipelineConfigError(
                f"coalition mask {intervention.coalition.mask} exceeds the "
                f"{len(self.players)}-player game"
            )
        if intervention.plan_mode is PlanMode.INJECTED and not intervention.injected_plan:
            raise PipelineConfigError("plan_mode=injected requires injected_plan")
        if replay is not None and replay.checkpoint_hash != checkpoint.checkpoint_hash:
            raise ReplayMismatchError(
                "replay archive was recorded on a different checkpoint "
                f"({replay.checkpoint_hash[:12]} != "
                f"{checkpoint.checkpoint_hash[:12]})"
            )
        effective_seed = self.config.seed if seed is None else seed
        with self._lock:
            run_id = f"run-{next(self._run_counter):04d}-{os.getpid()}"
            ledger = RunLedger(
                run_id,
                checkpoint,
                intervention,
                self.config,
                effective_seed,
                replay,
            )
            self._ledgers[run_id] = ledger
            self._active.add(run_id)
        for index, sample in enumerate(checkpoint.samples):
            ledger.sample_state[sample.sample_id] = "loaded"
            ledger.emit(EventKind.SAMPLE_LOADED, sample.sample_id, {"index": index})
            ledger.ready.append(
                Task(Stage.ANLZ, index, sample.sample_id, round_index=0)
            )
        return run_id

    def ledger(self, run_id: str) -> RunLedger:
        return self._ledgers[run_id]

    def run_to_completion(self, run_id: str) -> RunResult:
        ledger = self._ledgers[run_id]
        if ledger.done:
            raise PipelineConfigError(f"run {run_id} already completed")
        try:
            self._drive(ledger)
        finally:
            with self._lock:
                self._active.discard(run_id)
        after = ledger.checkpoint.checkpoint_hash
        if after != ledger.checkpoint_hash:
            raise CheckpointMutatedError(
                f"checkpoint hash changed during run {run_id}"
            )
        ledger.done = True
        outcomes = [
            ledger.best_outcomes[s.sample_id]
            for s in ledger.checkpoint.samples
        ]
        budget = self.config.k * self.config.rounds
        ledger.stats = stats_from_outcomes(ledger.checkpoint.g, outcomes, budget)
        programs = sum(
            len(state.candidates) for state in ledger.rounds.values()
        ) + sum(
            1
            for sid in ledger.fan_in.notes
            for _ in ledger.fan_in.notes[sid]
        )
        return RunResult(
            run_id=run_id,
            stats=ledger.stats,
            trace=tuple(ledger.events),
            makespan=ledger.clock,
            event_counts=dict(ledger.event_counts),
            max_gen_inflight=ledger.max_gen_inflight,
            max_eval_queue=ledger.max_eval_queue,
            programs=programs,
            sample_idle=self._idle_by_sample(ledger),
        )

    # -- scheduling ------------------------------------------------------------

    def _drive(self, led: RunLedger) -> None:
        cfg = self.config
        schedule_rng = (
            rng_for(cfg.schedule_seed, "schedule", led.run_id)
            if cfg.schedule_seed is not None
            else None
        )
        llm_inflight = 0
        gen_inflight = 0
        eval_inflight = 0
        eval_queued = sum(1 for t in led.ready if t.stage is Stage.EVAL)
        wave_order = self._wave_order()
        wave_index = 0
        last_progress = time.monotonic()

        def startable(task: Task) -> bool:
            if cfg.execution_mode is ExecutionMode.SERIAL and led.running:
                return False
            if cfg.execution_mode is ExecutionMode.STAGE_SYNC:
                if wave_order[wave_index] != (task.round_index, task.stage):
                    return False
            if task.stage in (Stage.ANLZ, Stage.GEN):
                if llm_inflight >= cfg.generator_concurrency:
                    return False
                # Backpressure on the GEN -> EVAL queue: each in-flight GEN
                # will enqueue up to k evaluations, so space is reserved at
                # start. Not applied under stage-sync, where the barrier
                # already serializes the stages and blocking producers
                # would deadlock against it.
                if (
                    task.stage is Stage.GEN
                    and cfg.execution_mode is not ExecutionMode.STAGE_SYNC
                    and eval_queued + (gen_inflight + 1) * cfg.k > cfg.queue_capacity
                ):
                    return False
                return True
            if task.stage is Stage.EVAL:
                return eval_inflight < cfg.eval_concurrency
            return True  # AGG

        while led.ready or led.running:
            if schedule_rng is not None:
                schedule_rng.shuffle(led.ready)
            else:
                led.ready.sort(key=Task.sort_key)
            deferred: list[Task] = []
            for task in led.ready:
                if not startable(task):
                    deferred.append(task)
                    continue
                if task.stage in (Stage.ANLZ, Stage.GEN):
                    llm_inflight += 1
                    led.max_llm_inflight = max(led.max_llm_inflight, llm_inflight)
                    if task.stage is Stage.GEN:
                        gen_inflight += 1
                        led.max_gen_inflight = max(led.max_gen_inflight, gen_inflight)
                elif task.stage is Stage.EVAL:
                    eval_inflight += 1
                    eval_queued -= 1
                # The agent call happens at task start; its results become
                # visible to the rest of the run only at completion time.
                payload, product = self._execute(led, task)
                duration = (
                    0.0
                    if payload.get("replayed")
                    else self.latency_model.duration(led.seed, task)
                )
                led._results[task] = (payload, product, led.clock)
                heapq.heappush(
                    led.running, (led.clock + duration, next(led._run_seq), task)
                )
            led.ready = deferred

            if not led.running:
                if not led.ready:
                    break
                current = wave_order[wave_index]
                has_current_wave = any(
                    (t.round_index, t.stage) == current for t in led.ready
                )
                if (
                    cfg.execution_mode is ExecutionMode.STAGE_SYNC
                    and not has_current_wave
                    and wave_index + 1 < len(wave_order)
                ):
                    wave_index += 1
                    continue
                raise PipelineStalledError(
                    "ready tasks cannot acquire resources", led.dump()
                )

            finish, _, task = heapq.heappop(led.running)
            led.clock = max(led.clock, finish)
            payload, product, started_at = led._results.pop(task)
            led.sample_spans.setdefault(task.sample_id, []).append(
                (started_at, finish)
            )
            followups = self._commit(led, task, product)
            led.emit(_STAGE_EVENT[task.stage], task.sample_id, payload)
            led.ready.extend(followups)
            if task.stage in (Stage.ANLZ, Stage.GEN):
                llm_inflight -= 1
                if task.stage is Stage.GEN:
                    gen_inflight -= 1
            elif task.stage is Stage.EVAL:
                eval_inflight -= 1
            eval_queued += sum(1 for t in followups if t.stage is Stage.EVAL)
            led.max_eval_queue = max(led.max_eval_queue, eval_queued)

            now = time.monotonic()
            if now - last_progress > cfg.watchdog_seconds:
                raise PipelineStalledError(
                    f"no event progress for {now - last_progress:.1f}s "
                    f"(watchdog {cfg.watchdog_seconds}s)",
                    led.dump(),
                )
            last_progress = now

        if len(led.aggregated) < len(led.checkpoint.samples):
            raise PipelineStalledError(
                "run incomplete but no tasks remain", led.dump()
            )

    def _wave_order(self) -> list[tuple[int, Stage]]:
        order: list[tuple[int, Stage]] = []
        for r in range(self.config.rounds):
            order.extend([(r, Stage.ANLZ), (r, Stage.GEN), (r, Stage.EVAL)])
        order.append((self.config.rounds - 1, Stage.AGG))
        return order

    def _idle_by_sample(self, led: RunLedger) -> dict[str, float]:
        idle: dict[str, float] = {}
        for sid, spans in led.sample_spans.items():
            spans = sorted(spans)
            gap = 0.0
            for (_, end_prev), (start_next, _) in zip(spans, spans[1:]):
                if start_next > end_prev:
                    gap += start_next - end_prev
            idle[sid] = gap
        return idle

    # -- task effects ------------------------------------------------------------

    def _execute(self, led: RunLedger, task: Task) -> tuple[dict, object]:
        """Run the task's work (agent calls); no ledger state transitions."""
        if task.stage is Stage.ANLZ:
            return self._exec_anlz(led, task)
        if task.stage is Stage.GEN:
            return self._exec_gen(led, task)
        if task.stage is Stage.EVAL:
            return self._exec_eval(led, task)
        return self._exec_agg(led, task)

    def _commit(self, led: RunLedger, task: Task, product: object) -> list[Task]:
        """Apply the completed task's results; returns follow-up tasks."""
        if task.stage is Stage.ANLZ:
            return self._commit_anlz(led, task, product)
        if task.stage is Stage.GEN:
            return self._commit_gen(led, task, product)
        if task.stage is Stage.EVAL:
            return self._apply_eval(led, task, product)
        return self._commit_agg(led, task, product)

    def _effective_source(self, led: RunLedger) -> ArtifactSource:
        source: ArtifactSource = self.artifact_source
        if led.intervention.permutation:
            source = PermutedArtifactSource(source, led.intervention.permutation)
        return _RepresentationSource(
            source, self.agents.summarizer, self._summary_cache
        )

    def _exec_anlz(self, led: RunLedger, task: Task) -> tuple[dict, object]:
        led.sample_state[task.sample_id] = f"analyzing r{task.round_index}"
        key = led.stage_key(Stage.ANLZ, task.sample_id, task.round_index)
        cached = led.replay.get(key) if led.replay else None
        if cached is not None:
            report = _report_from_json(cached["report"], self.players)
            plan = PlanArtifact(**cached["plan"]) if cached.get("plan") else None
            led.replay_hits += 1
            replayed = True
        else:
            intervention = led.intervention
            report = build_report(
                task.sample_id,
                intervention.coalition,
                intervention.representation,
                self._effective_source(led),
                self.players,
            )
            plan: PlanArtifact | None
            if intervention.plan_mode is PlanMode.SELF:
                plan = self.agents.planner.plan(report)
            elif intervention.plan_mode is PlanMode.DUMMY:
                plan = PlanArtifact(
                    text=dummy_plan(),
                    producer_tag="dummy-plan",
                    generation_context_hash=report.content_hash,
                )
            elif intervention.plan_mode is PlanMode.INJECTED:
                plan = intervention.injected_plan
            else:
                plan = None
            if plan is not None:
                report = replace(report, plan_slot=plan.text)
            led.cache[key] = {
                "kind": "anlz",
                "report": _report_to_json(report),
                "plan": (
                    {
                        "text": plan.text,
                        "producer_tag": plan.producer_tag,
                        "generation_context_hash": plan.generation_context_hash,
                    }
                    if plan
                    else None
                ),
            }
            replayed = False
        payload = {
            "round": task.round_index,
            "report_hash": report.content_hash,
            "replayed": replayed,
        }
        return payload, (report, plan)

    def _commit_anlz(self, led: RunLedger, task: Task, product) -> list[Task]:
        report, plan = product
        state = led.round_state(task.sample_id, task.round_index)
        state.report = report
        state.plan = plan
        return [Task(Stage.GEN, task.sample_index, task.sample_id, task.round_index)]

    def _exec_gen(self, led: RunLedger, task: Task) -> tuple[dict, object]:
        led.sample_state[task.sample_id] = f"generating r{task.round_index}"
        state = led.round_state(task.sample_id, task.round_index)
        key = led.stage_key(Stage.GEN, task.sample_id, task.round_index)
        cached = led.replay.get(key) if led.replay else None
        failures: list[tuple[int, str]] = []
        if cached is not None:
            candidates = [Candidate.from_json(c) for c in cached["candidates"]]
            failures = [(int(a), str(n)) for a, n in cached.get("failures", [])]
            led.replay_hits += 1
            replayed = True
        else:
            sample = led.samples_by_id[task.sample_id]
            outputs = self.agents.generator.generate(
                sample,
                state.report,
                state.plan,
                self.config.k,
                run_seed=led.seed,
                round_index=task.round_index,
            )
            candidates = []
            for attempt, item in enumerate(outputs):
                if isinstance(item, GeneratorAttemptError):
                    failures.append((attempt, str(item)))
                else:
                    candidates.append(item)
            led.cache[key] = {
                "kind": "gen",
                "candidates": [c.to_json() for c in candidates],
                "failures": [[a, n] for a, n in failures],
            }
            replayed = False
        payload = {
            "round": task.round_index,
            "n_candidates": len(candidates),
            "n_failed": len(failures),
            "replayed": replayed,
        }
        return payload, (candidates, failures)

    def _commit_gen(self, led: RunLedger, task: Task, product) -> list[Task]:
        candidates, failures = product
        state = led.round_state(task.sample_id, task.round_index)
        for cand in candidates:
            state.candidates[cand.attempt] = cand
        for attempt, note in failures:
            led.fan_in.record_failure(task.sample_id, task.round_index, attempt, note)
        led.fan_in.expect_evals(task.sample_id, task.round_index, len(candidates))
        if not candidates:
            return [self._after_round(led, task)]
        return [
            Task(
                Stage.EVAL,
                task.sample_index,
                task.sample_id,
                task.round_index,
                attempt=cand.attempt,
            )
            for cand in candidates
        ]

    def _exec_eval(self, led: RunLedger, task: Task) -> tuple[dict, object]:
        led.sample_state[task.sample_id] = (
            f"evaluating r{task.round_index}#{task.attempt}"
        )
        key = led.stage_key(
            Stage.EVAL, task.sample_id, task.round_index, task.attempt
        )
        cached = led.replay.get(key) if led.replay else None
        if cached is not None:
            record = ExecutionRecord.from_json(cached["record"])
            led.replay_hits += 1
            replayed = True
        else:
            state = led.round_state(task.sample_id, task.round_index)
            candidate = state.candidates[task.attempt]
            try:
                record = self.agents.evaluator.evaluate(candidate)
            except Exception as exc:  # noqa: BLE001 - crash becomes a Failed record
                record = crash_record(str(exc))
            led.cache[key] = {"kind": "eval", "record": record.to_json()}
            replayed = False
        level = classify_execution(record)
        payload = {
            "round": task.round_index,
            "attempt": task.attempt,
            "level": level.name,
            "replayed": replayed,
        }
        return payload, level

    def _apply_eval(
        self, led: RunLedger, task: Task, level: OutcomeLevel
    ) -> list[Task]:
        disposition = led.fan_in.record_eval(
            task.sample_id, task.round_index, task.attempt, level
        )
        if disposition is Disposition.DUPLICATE:
            logger.info(
                "duplicate evaluation event for %s r%d#%d ignored",
                task.sample_id,
                task.round_index,
                task.attempt,
            )
            return []
        if disposition is Disposition.PENDING:
            return []
        return [self._after_round(led, task)]

    def on_eval_complete(self, run_id: str, event: Event) -> list[Task]:
        """Deliver an evaluation-completed event; duplicates are ignored.

        This is the fan-in entry point the engine itself uses; exposing it
        lets tests deliver events out of order or twice.
        """
        if event.kind is not EventKind.EVAL_COMPLETED:
            raise ValueError("expected an EvalCompleted event")
        led = self._ledgers[run_id]
        index = led.checkpoint.sample_ids().index(event.sample_id)
        task = Task(
            Stage.EVAL,
            index,
            event.sample_id,
            int(event.payload["round"]),
            attempt=int(event.payload["attempt"]),
        )
        level = OutcomeLevel[event.payload["level"]]
        return self._apply_eval(led, task, level)

    def _after_round(self, led: RunLedger, task: Task) -> Task:
        next_round = task.round_index + 1
        if next_round < self.config.rounds:
            return Task(Stage.ANLZ, task.sample_index, task.sample_id, next_round)
        return Task(Stage.AGG, task.sample_index, task.sample_id, task.round_index)

    def _exec_agg(self, led: RunLedger, task: Task) -> tuple[dict, object]:
        best = led.fan_in.best_outcome(task.sample_id)
        return {"round": task.round_index, "best": best.name}, best

    def _commit_agg(self, led: RunLedger, task: Task, product) -> list[Task]:
        if task.sample_id in led.aggregated:
            logger.info("duplicate aggregation for %s ignored", task.sample_id)
            return []
        led.aggregated.add(task.sample_id)
        led.best_outcomes[task.sample_id] = product
        led.sample_state[task.sample_id] = f"aggregated ({product.name})"
        return []


# -- rollout glue --------------------------------------------------------------


def make_rollout_fn(
    pipe: InterventionPipeline,
    game: str = "components",
    representation: Representation = Representation.RAW,
):
    """Adapt a pipeline into attribution's rollout callable.

    Each rollout submits a fresh run whose seed is supplied by the
    estimator, so repeated rollouts differ while staying reproducible.
    """

    def rollout(
        checkpoint: GenerationCheckpoint, coalition: Coalition, seed: int
    ) -> GenerationStats:
        intervention = game_intervention(
            game, coalition, pipe.players, representation
        )
        run_id = pipe.submit(checkpoint, intervention, seed=seed)
        return pipe.run_to_completion(run_id).stats

    return rollout


# -- event trace + replay archives ----------------------------------------------


def export_trace(result: RunResult, path: str | Path) -> None:
    """Write the ordered event trace as newline-delimited JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        for event in result.trace:
            fh.write(json.dumps(event.to_json(), sort_keys=True) + "\n")


class ReplayCache:
    """Preloaded stage results from a prior run on the same checkpoint."""

    def __init__(self, checkpoint_hash: str, entries: Mapping[str, dict]):
        self.checkpoint_hash = checkpoint_hash
        self._entries = dict(entries)

    def get(self, stage_key: str) -> dict | None:
        return self._entries.get(stage_key)

    def __len__(self) -> int:
        return len(self._entries)

    def filter(self, kinds: Iterable[str]) -> "ReplayCache":
        """Keep only the given stage kinds (e.g. {"anlz"})."""
        wanted = set(kinds)
        return ReplayCache(
            self.checkpoint_hash,
            {k: v for k, v in self._entries.items() if v.get("kind") in wanted},
        )


def archive_run(pipe: InterventionPipeline, run_id: str, directory: str | Path) -> None:
    """Persist a completed run's stage results as content-addressed files."""
    led = pipe.ledger(run_id)
    base = Path(directory)
    entries_dir = base / "entries"
    entries_dir.mkdir(parents=True, exist_ok=True)
    index: dict[str, str] = {}
    for stage_key, payload in led.cache.items():
        blob = json.dumps(payload, sort_keys=True)
        name = "%016x.json" % derive_seed(0, "entry", blob)
        (entries_dir / name).write_text(blob, encoding="utf-8")
        index[stage_key] = name
    manifest = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "run_id": run_id,
        "checkpoint_hash": led.checkpoint_hash,
        "intervention_signature": led.intervention.signature(),
        "seed": led.seed,
        "k": led.config.k,
        "rounds": led.config.rounds,
    }
    (base / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    (base / "index.json").write_text(
        json.dumps(index, indent=2, sort_keys=True), encoding="utf-8"
    )


def replay_load(
    directory: str | Path, checkpoint: GenerationCheckpoint
) -> ReplayCache:
    """Load a replay archive, refusing checkpoints it was not recorded on."""
    base = Path(directory)
    manifest = json.loads((base / "manifest.json").read_text(encoding="utf-8"))
    recorded = manifest["checkpoint_hash"]
    actual = checkpoint.checkpoint_hash
    if recorded != actual:
        raise ReplayMismatchError(
            "replay archive checkpoint hash mismatch "
            f"({recorded[:12]} != {actual[:12]}); refusing to mix trajectories"
        )
    index = json.loads((base / "index.json").read_text(encoding="utf-8"))
    entries = {}
    for stage_key, name in index.items():
        entries[stage_key] = json.loads(
            (base / "entries" / name).read_text(encoding="utf-8")
        )
    return ReplayCache(recorded, entries)


def _report_to_json(report: Report) -> dict:
    return {
        "sample_id": report.sample_id,
        "coalition_mask": report.coalition.mask,
        "plan_slot": report.plan_slot,
        "artifacts": [
            {
                "component": {
                    "id": a.component.id,
                    "name": a.component.name,
                    "short": a.component.short,
                },
                "representation": a.representation.value,
                "payload": a.payload,
                "source_sample": a.source_sample,
            }
            for a in report.artifacts
        ],
    }


def _report_from_json(
    data: Mapping, players: tuple[FeedbackComponent, ...]
) -> Report:
    artifacts = []
    for item in data["artifacts"]:
        comp = item["component"]
        artifacts.append(
            FeedbackArtifact(
                component=FeedbackComponent(
                    int(comp["id"]), comp["name"], comp.get("short", "")
                ),
                representation=Representation(item["representation"]),
                payload=item["payload"],
                source_sample=item["source_sample"],
            )
        )
    return Report(
        sample_id=data["sample_id"],
        coalition=Coalition(int(data["coalition_mask"])),
        artifacts=tuple(artifacts),
        plan_slot=data.get("plan_slot"),
    )
