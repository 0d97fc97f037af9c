"""planlens: generation-level attribution of feedback-conditioned planning.

Freeze evolutionary trajectories at generation checkpoints, replay
planning under controlled feedback coalitions via an event-driven
pipeline, and decompose the resulting generation-level success rates
into per-component Banzhaf values and synergy terms.
"""

__version__ = "0.1.0"

from .attribution import (
    AttributionBundle,
    AttributionReport,
    CharacteristicTable,
    GameSpec,
    attribute,
    attribution_report,
    banzhaf,
    banzhaf_three_player,
    banzhaf_two_player,
    estimate_characteristic_table,
    estimate_payoff,
    shapley,
    sweep_characteristic_tables,
    synergy_full,
    synergy_pair,
    synergy_pair_adjusted,
    synergy_three,
)
from .costmodel import CostParams, b_e2e, b_pipe, coalition_count, scaling_table
from .feedback import (
    Coalition,
    FeedbackArtifact,
    FeedbackComponent,
    Report,
    Representation,
    build_report,
    default_components,
    dummy_plan,
    enumerate_coalitions,
    randomize_feedback,
)
from .gating import (
    CfgGraph,
    GateConfig,
    GateDecision,
    LazySummaryCache,
    Phase,
    gate,
    parse_dot,
    similarity,
    wl_similarity,
)
from .pipeline import (
    ExecutionMode,
    Intervention,
    InterventionPipeline,
    PipelineConfig,
    PlanMode,
    RunResult,
    archive_run,
    make_rollout_fn,
    replay_load,
)
from .trajectory import (
    ExecutionRecord,
    GenerationCheckpoint,
    GenerationStats,
    OutcomeLevel,
    Sample,
    TrajectoryStore,
    classify_execution,
    generation_stats,
    sample_best_outcome,
)

__all__ = [
    "__version__",
    "AttributionBundle",
    "AttributionReport",
    "CharacteristicTable",
    "CfgGraph",
    "Coalition",
    "CostParams",
    "ExecutionMode",
    "ExecutionRecord",
    "FeedbackArtifact",
    "FeedbackComponent",
    "GameSpec",
    "GateConfig",
    "GateDecision",
    "GenerationCheckpoint",
    "GenerationStats",
    "Intervention",
    "InterventionPipeline",
    "LazySummaryCache",
    "OutcomeLevel",
    "Phase",
    "PipelineConfig",
    "PlanMode",
    "Report",
    "Representation",
    "RunResult",
    "Sample",
    "TrajectoryStore",
    "archive_run",
    "attribute",
    "attribution_report",
    "b_e2e",
    "b_pipe",
    "banzhaf",
    "banzhaf_three_player",
    "banzhaf_two_player",
    "build_report",
    "classify_execution",
    "coalition_count",
    "default_components",
    "dummy_plan",
    "enumerate_coalitions",
    "estimate_characteristic_table",
    "estimate_payoff",
    "gate",
    "generation_stats",
    "make_rollout_fn",
    "parse_dot",
    "randomize_feedback",
    "replay_load",
    "sample_best_outcome",
    "scaling_table",
    "shapley",
    "similarity",
    "sweep_characteristic_tables",
    "synergy_full",
    "synergy_pair",
    "synergy_pair_adjusted",
    "synergy_three",
    "wl_similarity",
]
