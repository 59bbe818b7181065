import os

import pytest
from hypothesis import settings

from lyari.config import load_baseline
from lyari.lyari_optimizer import run_horizon

settings.register_profile("ci", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def baseline():
    return load_baseline()


@pytest.fixture(scope="session")
def baseline_run(baseline):
    """The 40-slot baseline horizon, shared by every test that only reads it."""
    return run_horizon(baseline.system, baseline.optimizer, baseline.T, baseline.X1)


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance(request):
    """Collects one (name, passed, detail) entry per acceptance criterion."""
    return request.config.stash.setdefault(ACCEPTANCE, {})


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, detail = results[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {name}: {detail}")
