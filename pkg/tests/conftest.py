import pytest

from planlens.agents import MockBehavior, mock_bundle, mock_artifact_payload
from planlens.feedback import (
    FeedbackArtifact,
    InMemoryArtifactSource,
    Representation,
    default_components,
)
from planlens.pipeline import InterventionPipeline, PipelineConfig
from planlens.trajectory import GenerationCheckpoint, Sample


def build_checkpoint(n_samples, g=0, trajectory_id="t"):
    samples = tuple(
        Sample(
            sample_id=f"s{i:03d}",
            generation_index=g,
            program_text=f"__global__ void k{i}() {{}}",
        )
        for i in range(n_samples)
    )
    return GenerationCheckpoint(trajectory_id=trajectory_id, g=g, samples=samples)


def build_source(checkpoint, players=None):
    players = players or default_components()
    source = InMemoryArtifactSource()
    for sample in checkpoint.samples:
        for component in players:
            source.put(
                FeedbackArtifact(
                    component=component,
                    representation=Representation.RAW,
                    payload=mock_artifact_payload(
                        sample, component.name, Representation.RAW
                    ),
                    source_sample=sample.sample_id,
                )
            )
    return source


def build_pipe(checkpoint, behavior=None, config=None, fail_attempts=frozenset(), crash_on=frozenset()):
    behavior = behavior or MockBehavior(seed=1)
    config = config or PipelineConfig(seed=0)
    bundle = mock_bundle(behavior, fail_attempts=fail_attempts, crash_on=crash_on)
    return InterventionPipeline(bundle, build_source(checkpoint), config=config)


@pytest.fixture
def checkpoint25():
    return build_checkpoint(25)
