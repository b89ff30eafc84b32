import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gasnet_verify.network import load_network, physical_topology, solve_steady_state
from gasnet_verify.sensing import SensorPlacement, rsd_to_noise

settings.register_profile(
    "repo", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("repo")


@pytest.fixture(scope="session")
def net1():
    return load_network("network1")


@pytest.fixture(scope="session")
def net2():
    return load_network("network2")


@pytest.fixture(scope="session")
def ring():
    return load_network("ring5")


@pytest.fixture(scope="session")
def case1(net1):
    """Network 1 case 1: believed CCC, true CCO, 10% noise from the CCC state."""
    pl = SensorPlacement.default(net1)
    h0 = physical_topology(net1, [True, True, True])
    h1 = physical_topology(net1, [True, True, False])
    s0 = solve_steady_state(net1, h0)
    s1 = solve_steady_state(net1, h1)
    noise = rsd_to_noise(0.10, s0, pl)
    return {"net": net1, "pl": pl, "h0": h0, "h1": h1, "s0": s0, "s1": s1, "noise": noise}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one summary line per acceptance criterion."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
