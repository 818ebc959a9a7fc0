from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from emspectra.bench import builtin_scenarios
from emspectra.gmm import GmmProblem, generate_dataset

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("repo")

THETA0 = np.array([0.5, -0.5, 1.5, 0.5, 1.5])


def scenario_problem(name: str, trial: int = 0) -> GmmProblem:
    s = next(s for s in builtin_scenarios() if s.name == name)
    return GmmProblem(generate_dataset(s.true_params, s.n_samples, s.seed(trial)))


@pytest.fixture(scope="session")
def extreme_problem() -> GmmProblem:
    return scenario_problem("Extreme", 0)


@pytest.fixture
def criterion(request):
    """Record a one-line verdict for an acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        lines = request.config.stash.setdefault(_LINES, {})
        lines[number] = line
        return ok

    return record


_LINES = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
