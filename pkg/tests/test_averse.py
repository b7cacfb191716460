import numpy as np
import pytest
from conftest import node, random_instance, single_scenario
from hypothesis import given, settings
from hypothesis import strategies as st

from p2prisk.averse import (
    cvar, extract_tau, node_cvar, rockafellar, solve_centralized_averse, solve_p2p_averse, var_lower,
)
from p2prisk.experiments import generate_threenode
from p2prisk.formulation import NonconvexModelError, build
from p2prisk.model import EdgeParams, MarketInstance
from p2prisk.neutral import solve_centralized_neutral


@pytest.mark.parametrize("losses, probs, chi, expected", [
    ([0.0, 10.0], [0.5, 0.5], 0.5, 10.0),
    ([0.0, 10.0], [0.5, 0.5], 0.0, 5.0),
    ([1.0, 2.0, 3.0], [0.2, 0.3, 0.5], 0.9, 3.0),
    ([4.0], [1.0], 0.7, 4.0),
    ([1.0, 3.0, 5.0], [1 / 3, 1 / 3, 1 / 3], 0.5, 13 / 3),
])
def test_cvar_hand_values(losses, probs, chi, expected):
    assert cvar(losses, probs, chi) == pytest.approx(expected, abs=1e-12)


def test_cvar_input_errors():
    with pytest.raises(ValueError):
        cvar([], [], 0.5)
    with pytest.raises(ValueError):
        cvar([1.0, 2.0], [0.5, 0.6], 0.5)
    with pytest.raises(ValueError):
        cvar([1.0], [1.0], 1.0)


def test_var_lower_is_quantile():
    assert var_lower([3.0, 1.0, 2.0], [1 / 3] * 3, 0.5) == 2.0
    assert var_lower([3.0, 1.0, 2.0], [1 / 3] * 3, 0.0) == 1.0


@pytest.mark.parametrize("seed", range(50))
def test_cvar_matches_grid_search(seed):
    # losses on a 0.01 lattice, so the 10^4 grid holds every kink of the objective
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 8))
    losses = rng.integers(0, 10001, k) * 0.01
    probs = rng.dirichlet(np.ones(k))
    chi = float(rng.uniform(0, 0.95))
    grid = np.linspace(0.0, 100.0, 10001)
    brute = rockafellar(grid, losses, probs, chi).min()
    assert cvar(losses, probs, chi) == pytest.approx(brute, abs=1e-6)


def test_cvar_grid_off_lattice():
    # off the lattice the grid overshoots by at most one spacing times the slope bound
    rng = np.random.default_rng(7)
    for _ in range(20):
        losses = rng.normal(size=5) * 10
        probs = rng.dirichlet(np.ones(5))
        chi = float(rng.uniform(0, 0.9))
        grid = np.linspace(losses.min(), losses.max(), 10000)
        brute = rockafellar(grid, losses, probs, chi).min()
        exact = cvar(losses, probs, chi)
        assert exact <= brute + 1e-12
        assert brute - exact <= (grid[1] - grid[0]) / (1 - chi)


dists = st.integers(1, 6).flatmap(lambda k: st.tuples(
    st.lists(st.floats(-100, 100), min_size=k, max_size=k),
    st.lists(st.floats(0.01, 1.0), min_size=k, max_size=k),
    st.floats(0.0, 0.95),
))


def normalize(p):
    p = np.asarray(p)
    return p / p.sum()


@settings(max_examples=100, deadline=None)
@given(dists, st.floats(-50, 50), st.floats(0.01, 20))
def test_coherence(dist, shift, scale):
    losses, probs, chi = np.asarray(dist[0]), normalize(dist[1]), dist[2]
    base = cvar(losses, probs, chi)
    assert cvar(losses + shift, probs, chi) == pytest.approx(base + shift, abs=1e-10 * (1 + abs(base)))
    assert cvar(scale * losses, probs, chi) == pytest.approx(scale * base, abs=1e-10 * (1 + scale * abs(base)))
    bumped = losses + np.abs(np.sin(losses))
    assert cvar(bumped, probs, chi) >= base - 1e-10


@settings(max_examples=50, deadline=None)
@given(dists, st.lists(st.floats(-100, 100), min_size=6, max_size=6))
def test_subadditive_and_bounded(dist, other):
    losses, probs, chi = np.asarray(dist[0]), normalize(dist[1]), dist[2]
    other = np.asarray(other[: len(losses)])
    total = cvar(losses + other, probs, chi)
    assert total <= cvar(losses, probs, chi) + cvar(other, probs, chi) + 1e-9
    assert probs @ losses - 1e-9 <= cvar(losses, probs, chi) <= losses.max() + 1e-9
    # convex in the losses (costs are minimized, so convexity is the relevant property)
    for t in (0.25, 0.5, 0.9):
        mix = cvar(t * losses + (1 - t) * other, probs, chi)
        assert mix <= t * cvar(losses, probs, chi) + (1 - t) * cvar(other, probs, chi) + 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_epigraph_equals_direct_cvar(seed):
    rep = solve_centralized_averse(random_instance(seed))
    assert rep.optimal
    assert rep.extras["epigraph_vs_cvar_gap"] <= 1e-6
    assert rep.objective == pytest.approx(node_cvar(rep.instance, rep.allocation).sum(), abs=1e-6)


def test_zero_chi_equals_neutral():
    inst = random_instance(4, chi=np.zeros(3))
    averse = solve_centralized_averse(inst)
    neutral = solve_centralized_neutral(inst)
    assert averse.objective == pytest.approx(neutral.expected_sc, abs=1e-6)


def test_single_scenario_cvar_is_cost():
    nodes = (node(0, chi=0.6, res=(1.0,)), node(1, chi=0.2, res=(4.0,)))
    inst = MarketInstance(nodes, (EdgeParams(0, 1, 5.0, 0.0, 1.0, 1.0),), single_scenario())
    rep = solve_centralized_averse(inst)
    assert rep.objective == pytest.approx(rep.expected_sc, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_averse_not_below_neutral(seed):
    inst = random_instance(seed)
    assert solve_centralized_averse(inst).objective >= solve_centralized_neutral(inst).expected_sc - 1e-8


def test_risk_adjusted_probabilities(threenode):
    rp = extract_tau(solve_centralized_averse(threenode))
    assert rp.budget_residual <= 1e-6
    assert rp.identity_residual <= 1e-6
    assert not rp.flagged
    assert np.all(rp.tau <= rp.cap + 1e-9)


def test_tau_cap_uniform_probabilities():
    inst = generate_threenode(chi=(0.3, 0.3, 0.3), seed=1)
    rp = extract_tau(solve_centralized_averse(inst))
    assert rp.cap[0, 0] == pytest.approx(1 / 3 / 0.7)
    assert rp.cap[0, 0] == pytest.approx(0.476190, abs=1e-6)
    assert np.all(rp.tau[rp.labels == "above"] == pytest.approx(rp.cap[rp.labels == "above"], abs=1e-6))


def test_social_equivalence_players(threenode):
    rep = solve_p2p_averse(threenode)
    assert rep.mode == "p2p-averse"
    assert rep.extras["player_kkt_max"] <= 1e-6
    assert rep.extras["zeta_alignment"] <= 1e-8


def test_gauss_seidel_matches_centralized(threenode):
    cent = solve_centralized_averse(threenode)
    gs = solve_p2p_averse(threenode, mode="gauss-seidel")
    assert gs.optimal
    assert gs.objective == pytest.approx(cent.objective, abs=1e-6)
    mp = build(threenode, risk="averse")
    assert mp.distance_to_optimal_set(mp.x_from_allocation(gs.allocation), cent.objective) <= 1e-4
    assert gs.extras["player_kkt_max"] <= 1e-6
    assert gs.extras["gs_trace"].merit_increase <= 1e-10


def test_quadratic_links_need_gauss_seidel(congested_pair):
    with pytest.raises(NonconvexModelError):
        solve_centralized_averse(congested_pair)
    with pytest.raises(NonconvexModelError):
        solve_p2p_averse(congested_pair)
    rep = solve_p2p_averse(congested_pair, mode="gauss-seidel")
    assert rep.label == "fixed point, uniqueness unverified"


@pytest.mark.parametrize("seed", [2, 3])
def test_gauss_seidel_other_seeds(seed):
    # multipliers come from a least-squares recovery at the fixed point, so alignment is checked loosely here
    inst = generate_threenode(chi=(0.3, 0.4, 0.5), seed=seed)
    rep = solve_p2p_averse(inst, mode="gauss-seidel")
    assert rep.optimal
    assert rep.extras["player_kkt_max"] <= 1e-6
    assert rep.extras["zeta_alignment"] <= 1e-7
    assert rep.objective == pytest.approx(solve_centralized_averse(inst).objective, abs=1e-6)
