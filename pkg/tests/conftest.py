import numpy as np
import pytest

from pnlcausal import flows
from pnlcausal.dataio import generate_synthetic, normalise
from pnlcausal.flows import SplineFlow
from pnlcausal.optim import FitConfig


def random_flow(rng, num_bins=5, bound=3.0, spread=0.8, base_log_var=None):
    """Flow with generic (far from identity) parameters."""
    return SplineFlow(num_bins, bound,
                      spread * rng.standard_normal(num_bins),
                      spread * rng.standard_normal(num_bins),
                      flows.IDENTITY_RAW_DERIV + spread * rng.standard_normal(num_bins + 1),
                      spread * rng.standard_normal(num_bins),
                      0.3 * rng.standard_normal() if base_log_var is None else base_log_var)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def synthetic_pair():
    return normalise(generate_synthetic(500, 0))


@pytest.fixture(scope="session")
def default_config():
    return FitConfig()


@pytest.fixture(scope="session")
def synthetic_pnl_fit(synthetic_pair, default_config):
    from pnlcausal.pnl import fit_pnl
    return fit_pnl(synthetic_pair.x, synthetic_pair.y, default_config, 0)


# one status line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
