import numpy as np
import pytest

from riskpomdp import frg
from riskpomdp.solver import SolverConfig, solve_pomdp


@pytest.fixture(scope="session")
def fixture_model():
    return frg.build_frg_fixture()[0]


@pytest.fixture(scope="session")
def fixture_posterior():
    return frg.build_frg_fixture()[1]


@pytest.fixture(scope="session")
def policy_098(fixture_model):
    return solve_pomdp(fixture_model, 0.98, SolverConfig(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; repeated in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("C", 1)[1].split(":")[0].split()[0])):
            terminalreporter.write_line(line)
