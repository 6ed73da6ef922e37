import time
from dataclasses import dataclass

import numpy as np
import pytest

from pathattr.data import Dataset
from pathattr.model import LayerSpec, TinyCnnParams
from pathattr.synth import SynthSpec, synthesize
from pathattr.trainer import RunMetrics, TrainingConfig, train


@dataclass
class ReferenceRun:
    dataset: Dataset
    params: TinyCnnParams
    metrics: RunMetrics
    seconds: float

    @property
    def test_indices(self) -> np.ndarray:
        return np.asarray(self.metrics.test_indices)


@pytest.fixture(scope="session")
def synthetic() -> Dataset:
    return synthesize(SynthSpec())


@pytest.fixture(scope="session")
def reference_run(synthetic) -> ReferenceRun:
    """The default synthetic set trained once with the default hyperparameters."""
    started = time.perf_counter()
    params, metrics = train(synthetic, TrainingConfig())
    return ReferenceRun(synthetic, params, metrics, time.perf_counter() - started)


@pytest.fixture
def small_spec() -> LayerSpec:
    return LayerSpec(input_shape=(1, 8, 8), conv_channels=(2, 3), dense_widths=(8,), num_classes=3)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.TITLES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.lines():
            terminalreporter.write_line(line)
