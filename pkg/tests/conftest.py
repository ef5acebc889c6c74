import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

from lassornet.data import SynthSpec, prepare_split, synth_cohort  # noqa: E402


@pytest.fixture(scope="session")
def small_cohort():
    spec = SynthSpec(n_people=10, n_samples=6, n_genes=12, n_rhythmic=6, noise_sd=0.1, sample_interval=4.0)
    return synth_cohort(spec, seed=3)


@pytest.fixture(scope="session")
def small_split(small_cohort):
    return prepare_split(small_cohort, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = []


@pytest.fixture
def verdict(request):
    """Record one pass/fail line for an acceptance criterion, then assert it."""
    seen = []

    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        seen.append(line)
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    yield record
    if not seen:
        _VERDICTS.append(f"{request.node.name}: FAIL  (raised before reaching a verdict)")


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
