import numpy as np
import pytest

from p2prisk.experiments import generate_bus14, generate_threenode
from p2prisk.model import EdgeParams, MarketInstance, ProsumerParams, Scenario, ScenarioSet

HETERO_CHI = (0.3, 0.4, 0.5)
BUS14_CHI = tuple(0.1 + 0.05 * k for k in range(14))


def node(id, **kw):
    base = dict(d_lo=0.0, d_hi=10.0, g_lo=0.0, g_hi=10.0, a=2.0, b=10.0, a_util=1.0, b_util=0.0,
                target_demand=(5.0,), res=(0.0,), chi=0.0)
    base.update(kw)
    return ProsumerParams(id=id, **base)


def single_scenario(p0=1.0):
    return ScenarioSet((Scenario("w0", 1.0, p0),))


@pytest.fixture(scope="session")
def threenode():
    """Three-node fixture with heterogeneous risk levels and gamma = p / (1 - max chi)."""
    return generate_threenode(chi=HETERO_CHI, seed=1, gamma_rule="max-chi")


@pytest.fixture(scope="session")
def bus14():
    return generate_bus14(pricing="heterogeneous", seed=1, chi=BUS14_CHI, gamma_rule="max-chi")


@pytest.fixture(scope="session")
def congested_pair():
    """Root plus two nodes with quadratic link costs (a > 0) and one scenario."""
    nodes = (
        node(0, a=4.0, b=30.0, target_demand=(4.0,)),
        node(1, a=2.0, b=8.0, target_demand=(7.0,), res=(3.0,)),
        node(2, a=3.0, b=12.0, target_demand=(6.0,), res=(1.0,)),
    )
    edges = (
        EdgeParams(0, 1, 10.0, 0.5, 2.0, 1.0),
        EdgeParams(0, 2, 10.0, 0.7, 1.5, 1.0),
        EdgeParams(1, 2, 5.0, 0.3, 0.5, 0.6),
    )
    return MarketInstance(nodes, edges, single_scenario(1.2))


def isolated_community():
    """Root links with zero capacity, scarce RES and high targets, so nothing crosses the root links."""
    nodes = (
        node(0, a=4.0, b=30.0, target_demand=(4.0,)),
        node(1, a=2.0, b=8.0, target_demand=(9.0,), res=(0.5,)),
        node(2, a=3.0, b=12.0, target_demand=(8.0,), res=(0.2,)),
    )
    edges = (
        EdgeParams(0, 1, 0.0, 0.5, 2.0, 1.0),
        EdgeParams(0, 2, 0.0, 0.7, 1.5, 1.0),
        EdgeParams(1, 2, 5.0, 0.3, 0.5, 0.6),
    )
    return MarketInstance(nodes, edges, single_scenario(1.2))


def random_instance(seed, a_scale=0.0, n_scenarios=3, chi=None):
    """Small random three-node instance; ``a_scale > 0`` gives quadratic link costs."""
    rng = np.random.default_rng(seed)
    S = n_scenarios
    probs = rng.dirichlet(np.ones(S) * 3)
    chi = rng.uniform(0.0, 0.8, 3) if chi is None else chi
    nodes = tuple(
        node(n, a=float(rng.uniform(1, 5)), b=float(rng.uniform(5, 30)), a_util=float(rng.uniform(0.5, 2)),
             target_demand=tuple(rng.uniform(3, 8, S)), res=tuple(rng.uniform(0, 6, S) if n else np.zeros(S)),
             chi=float(chi[n]))
        for n in range(3)
    )
    edges = tuple(
        EdgeParams(i, j, float(rng.uniform(3, 10)), float(a_scale * rng.uniform(0.2, 1.0)),
                   float(rng.uniform(0.2, 2)), float(rng.uniform(0.2, 2)))
        for i, j in ((0, 1), (0, 2), (1, 2))
    )
    scen = ScenarioSet(tuple(Scenario(f"w{k}", float(probs[k]), float(rng.uniform(0.5, 2))) for k in range(S)))
    return MarketInstance(nodes, edges, scen)


# -- acceptance summary --------------------------------------------------------------------

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None and rep.when == "call":
        detail = dict(item.user_properties).get("detail", "")
        _CRITERIA.append((mark.args[0], mark.args[1], rep.passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, ok, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
