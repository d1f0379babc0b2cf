import numpy as np
import pytest

from adaptive_diffusion.model import LogisticNodeModel, calibrate_common_minimizer
from adaptive_diffusion.network import generate_topology

# Lines registered by the acceptance module, echoed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_network():
    """Six-node random graph with calibrated logistic nodes (M = 3)."""
    t = generate_topology(6, "random", seed=11, p=0.5)
    means = [0.7, 0.9, 1.1, 1.3, 0.8, 1.0]
    variances = [0.02, 0.5, 0.1, 0.9, 0.05, 0.3]
    models = [LogisticNodeModel(3, m, v, 0.5, 0.01) for m, v in zip(means, variances)]
    truth, models = calibrate_common_minimizer(models, 0.5)
    return t, models, truth
