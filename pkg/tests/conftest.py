import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "pqps", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("pqps")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_knots(rng, K, min_gap=1e-3):
    """Sorted interior knots in (0, 1) with a minimum spacing."""
    while True:
        g = np.sort(rng.uniform(0.0, 1.0, K))
        ext = np.concatenate([[0.0], g, [1.0]])
        if K == 0 or np.min(np.diff(ext)) > min_gap:
            return g


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
