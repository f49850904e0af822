import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from streamnas.data import generate_synthetic
from streamnas.topology import DSConv1D, Dense, GlobalAvgPool, MaxPool1D, Topology
from streamnas.trainer import TrainConfig, train


def small_topology(width=32, channels=2):
    return Topology((DSConv1D(3, 1, 4), MaxPool1D(2), DSConv1D(5, 2, 8, padding=1),
                     GlobalAvgPool(), Dense(2)), channels, width)


# depth-2 network that learns the synthetic task at width 512
REFERENCE_TOPOLOGY = Topology((DSConv1D(9, 2, 32), DSConv1D(5, 2, 16), GlobalAvgPool(), Dense(2)), 2, 512)


@pytest.fixture(scope="session")
def synthetic_1000():
    return generate_synthetic(1000, 512, seed=1)


@pytest.fixture(scope="session")
def reference_model(synthetic_1000):
    params, metrics = train(REFERENCE_TOPOLOGY, synthetic_1000, TrainConfig(epochs=15, seed=0))
    return params, metrics


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
