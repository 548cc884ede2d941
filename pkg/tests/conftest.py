import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from occavg.instances import linear_benchmark, two_state_mdp
from occavg.measures import GridSpec

settings.register_profile("occavg", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("occavg")


@pytest.fixture(scope="session")
def lin():
    return linear_benchmark()


@pytest.fixture(scope="session")
def mdp():
    return two_state_mdp()


@pytest.fixture
def grid52():
    return GridSpec(np.linspace(0.0, 1.0, 5), [0.0, 1.0], [0.0], [1.0])


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion; they are repeated in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def report(k, ok, detail):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
