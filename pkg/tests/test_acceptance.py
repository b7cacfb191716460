"""Acceptance suite: one test per criterion, summarized at the end of the run.

Each test records a one-line ``detail`` with the measured worst case before
asserting, so the summary shows the numbers for failures too.
"""

import time

import numpy as np
import pytest
from conftest import HETERO_CHI, isolated_community, random_instance
from test_neutral import flat, random_start

from p2prisk.averse import cvar, rockafellar, solve_centralized_averse, solve_p2p_averse
from p2prisk.contracts import solve_complete_centralized, solve_complete_p2p_gaussseidel
from p2prisk.experiments import generate_bus14, generate_threenode, mean_preserving_schedule, sweep_heterogeneity
from p2prisk.formulation import build
from p2prisk.neutral import (
    closed_form_check, compare_designs, extract_nodal_prices_centralized, extract_nodal_prices_p2p,
    solve_centralized_neutral, solve_p2p_neutral,
)

SOLVERS = {
    "centralized-neutral": lambda inst: solve_centralized_neutral(inst),
    "p2p-neutral": lambda inst: solve_p2p_neutral(inst),
    "centralized-averse": lambda inst: solve_centralized_averse(inst),
    "p2p-averse": lambda inst: solve_p2p_averse(inst),
    "contracts-centralized": lambda inst: solve_complete_centralized(inst)[0],
    "contracts-gauss-seidel": lambda inst: solve_complete_p2p_gaussseidel(inst)[0],
}


def timed_modes(inst):
    out = {}
    for mode, fn in SOLVERS.items():
        t = time.perf_counter()
        rep = fn(inst)
        out[mode] = (rep, time.perf_counter() - t)
    return out


@pytest.fixture(scope="module")
def three_runs(threenode):
    return timed_modes(threenode)


@pytest.fixture(scope="module")
def bus14_runs(bus14):
    return timed_modes(bus14)


def detail(record_property, text):
    record_property("detail", text)
    print(text)


def kkt_worst(rep):
    return max(rep.residuals.max(), rep.extras.get("player_kkt_max", 0.0))


@pytest.mark.criterion(1, "KKT soundness")
def test_kkt_soundness(record_property, three_runs, bus14_runs):
    rows = []
    ok = True
    for name, runs, budget in (("3-node", three_runs, 1.0), ("14-bus", bus14_runs, 60.0)):
        worst = max(kkt_worst(rep) for rep, _ in runs.values())
        slowest = max(runs, key=lambda m: runs[m][1])
        statuses = {rep.status for rep, _ in runs.values()}
        rows.append(f"{name} max residual {worst:.1e}, slowest {slowest} {runs[slowest][1]:.2f}s")
        ok &= worst <= 1e-6 and runs[slowest][1] <= budget and statuses == {"optimal"}
    detail(record_property, "; ".join(rows))
    assert ok


@pytest.mark.criterion(2, "closed forms")
def test_closed_forms(record_property, three_runs, bus14_runs):
    worst = max(closed_form_check(runs["centralized-neutral"][0]).max for runs in (three_runs, bus14_runs))
    detail(record_property, f"max |primal - closed form| {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.criterion(3, "nodal-price identities")
def test_price_identities(record_property, three_runs, bus14_runs, congested_pair):
    cent = max(extract_nodal_prices_centralized(runs["centralized-neutral"][0]).residual
               for runs in (three_runs, bus14_runs))
    p2p = max(extract_nodal_prices_p2p(solve_p2p_neutral(inst)).residual
              for inst in (congested_pair, random_instance(0, a_scale=1.0)))
    cmp = compare_designs(congested_pair)
    gap = float(np.max(np.abs(cmp.decomposition_gap - cmp.predicted_gap)))
    iso = compare_designs(isolated_community())
    iso_gap = float(np.max(np.abs(iso.decomposition_gap)))
    detail(record_property, f"centralized {cent:.1e}, p2p {p2p:.1e}, gap prediction {gap:.1e}, isolated {iso_gap:.1e}")
    assert cent <= 1e-8 and p2p <= 1e-8 and gap <= 1e-6 and iso_gap <= 1e-6


@pytest.mark.criterion(4, "epigraph equals direct CVaR")
def test_epigraph_cvar(record_property):
    worst = max(solve_centralized_averse(random_instance(s)).extras["epigraph_vs_cvar_gap"] for s in range(20))
    detail(record_property, f"20 instances, max gap {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.criterion(5, "risk-averse p2p equals centralized")
def test_p2p_averse_equivalence(record_property, threenode):
    cent = solve_centralized_averse(threenode)
    mp = build(threenode, risk="averse")
    rows, ok = [], True
    for mode in ("social-equivalence", "gauss-seidel"):
        rep = solve_p2p_averse(threenode, mode=mode)
        dist = mp.distance_to_optimal_set(mp.x_from_allocation(rep.allocation), cent.objective)
        gap = abs(rep.objective - cent.objective)
        zeta = rep.extras["zeta_alignment"]
        rows.append(f"{mode} distance {dist:.1e} objective gap {gap:.1e} zeta {zeta:.1e}")
        ok &= rep.optimal and dist <= 1e-4 and gap <= 1e-6 and zeta <= 1e-8
    detail(record_property, "; ".join(rows))
    assert ok


@pytest.mark.criterion(6, "uniqueness from random starts")
def test_uniqueness(record_property):
    worst = 0.0
    for seed in range(10):
        inst = random_instance(seed, a_scale=1.0)
        rng = np.random.default_rng(500 + seed)
        sols = [flat(solve_p2p_neutral(inst, x0=random_start(inst, rng)).allocation) for _ in range(5)]
        worst = max(worst, max(np.max(np.abs(a - b)) for i, a in enumerate(sols) for b in sols[i + 1:]))
    detail(record_property, f"10 instances x 5 starts, max pairwise distance {worst:.1e}")
    assert worst <= 1e-5


def battery_instance(seed):
    probe = random_instance(seed)
    rng = np.random.default_rng(1000 + seed)
    return random_instance(seed, chi=rng.uniform(0, 0.95 * (1 - probe.probs.max()), 3))


@pytest.mark.criterion(7, "regime battery")
def test_regime_battery(record_property):
    worst = {"alpha-gamma": -np.inf, "1a": 0.0, "J in branch 2": 0.0, "2c": 0.0, "recovery": 0.0}
    counts = {}
    for seed in range(100):
        base = battery_instance(seed)
        p = base.probs
        lo, hi = p / (1 - base.chi.min()), p / (1 - base.chi.max())
        for gamma in (0.8 * lo, np.minimum(1.2 * hi, 1.0), 0.5 * (lo + hi)):
            _, book, labels = solve_complete_centralized(base.with_gamma(gamma))
            alpha = book.alpha_recovered
            worst["recovery"] = max(worst["recovery"], book.alpha_recovery_residual)
            for w, lab in enumerate(labels):
                counts[lab.regime] = counts.get(lab.regime, 0) + 1
                worst["alpha-gamma"] = max(worst["alpha-gamma"], float(np.max(alpha[:, w] - gamma[w])))
                if lab.regime == "1a" and np.any(book.J[:, w] > 1e-8):
                    worst["1a"] = max(worst["1a"], float(np.max(np.abs(alpha[:, w] - gamma[w]))))
                if lab.branch == 2:
                    worst["J in branch 2"] = max(worst["J in branch 2"], float(np.max(book.J[:, w])))
                if lab.regime == "2c":
                    worst["2c"] = max(worst["2c"], float(np.max(np.abs(alpha[:, w] - lo[w]))))
    regimes = " ".join(f"{k}:{v}" for k, v in sorted(counts.items()))
    detail(record_property, f"regimes {regimes}; " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert worst["alpha-gamma"] <= 1e-9 and worst["1a"] <= 1e-7
    assert worst["J in branch 2"] <= 1e-8 and worst["2c"] <= 1e-7 and worst["recovery"] <= 1e-7


@pytest.mark.criterion(8, "three-node contract table")
def test_contract_table(record_property):
    inst = generate_threenode(chi=HETERO_CHI, seed=1, gamma_rule="max-chi")
    _, book, labels = solve_complete_centralized(inst)
    alpha_err = float(np.max(np.abs(book.alpha - 0.476190)))
    ident = float(np.max(np.abs(book.tau - (book.alpha + book.phi)[None, :])))
    regimes = [lab.regime for lab in labels]
    detail(record_property, f"alpha {book.alpha[0]:.6f} (err {alpha_err:.1e}), tau - (alpha + phi) {ident:.1e}, "
                            f"regimes {regimes}")
    assert all(r.startswith("2") for r in regimes) and alpha_err <= 1e-5 and ident <= 1e-7


@pytest.mark.criterion(9, "aligned risk-adjusted probabilities")
def test_tau_alignment(record_property, threenode, bus14):
    spreads = []
    for inst in (threenode, bus14):
        spreads.append(solve_complete_centralized(inst)[1].tau_spread.max())
    spreads.append(solve_complete_p2p_gaussseidel(threenode)[1].tau_spread.max())
    worst = float(max(spreads))
    detail(record_property, f"max tau spread {worst:.1e}")
    assert worst <= 1e-6


@pytest.mark.criterion(10, "risk ordering")
def test_risk_ordering(record_property, bus14):
    cases = [generate_threenode(chi=c, seed=1) for c in ((0.3, 0.4, 0.5), (0.3, 0.3, 0.3), (0.3, 0.9, 0.3))]
    # p / (1 - max chi) exceeds one for chi = 0.9, so prices are capped at one
    cases = [inst.with_gamma(np.minimum(inst.probs / (1 - inst.chi.max()), 1.0)) for inst in cases] + [bus14]
    neutral_gap, contract_gap = np.inf, -np.inf
    for inst in cases:
        neutral = solve_centralized_neutral(inst).expected_sc
        averse = solve_centralized_averse(inst).objective
        with_contracts = solve_complete_centralized(inst)[0].objective
        neutral_gap = min(neutral_gap, averse - neutral)
        contract_gap = max(contract_gap, with_contracts - averse)
    detail(record_property, f"min averse - neutral {neutral_gap:.3g}, max contracts - averse {contract_gap:.3g}")
    assert neutral_gap >= -1e-8 and contract_gap <= 1e-8


@pytest.mark.criterion(11, "contract balance")
def test_balance(record_property, threenode, bus14):
    books = [solve_complete_centralized(threenode)[1], solve_complete_centralized(bus14)[1],
             solve_complete_p2p_gaussseidel(threenode)[1]]
    for seed in range(20):
        base = battery_instance(seed)
        books.append(solve_complete_centralized(base.with_gamma(base.probs / (1 - base.chi.max())))[1])
    worst = max(b.balance_residual for b in books)
    detail(record_property, f"{len(books)} contract solves, max |sum(W + J)| {worst:.1e}")
    assert worst <= 1e-8


@pytest.mark.criterion(12, "Gauss-Seidel convergence")
def test_gauss_seidel(record_property, threenode):
    cent = solve_complete_centralized(threenode)[0]
    rep, _, trace = solve_complete_p2p_gaussseidel(threenode)
    mp = build(threenode, risk="averse", contracts=True)
    dist = mp.distance_to_optimal_set(mp.x_from_allocation(rep.allocation), cent.objective)
    detail(record_property, f"{trace.sweeps} sweeps, max merit increase {trace.merit_increase:.1e}, "
                            f"distance to centralized {dist:.1e}")
    assert trace.converged and trace.sweeps <= 500 and trace.merit_increase <= 1e-10 and dist <= 1e-4


@pytest.mark.criterion(13, "CVaR oracle and axioms")
def test_cvar_oracle(record_property):
    rng = np.random.default_rng(2024)
    grid = np.linspace(0.0, 100.0, 10001)
    oracle = 0.0
    for _ in range(50):
        k = int(rng.integers(1, 8))
        losses = rng.integers(0, 10001, k) * 0.01
        probs = rng.dirichlet(np.ones(k))
        chi = float(rng.uniform(0, 0.95))
        oracle = max(oracle, abs(cvar(losses, probs, chi) - rockafellar(grid, losses, probs, chi).min()))
    axiom = 0.0
    for _ in range(200):
        k = int(rng.integers(1, 8))
        losses = rng.normal(size=k) * 10
        probs = rng.dirichlet(np.ones(k))
        chi = float(rng.uniform(0, 0.95))
        base = cvar(losses, probs, chi)
        c, t = rng.normal() * 10, rng.uniform(0.1, 5)
        axiom = max(axiom, abs(cvar(losses + c, probs, chi) - base - c) / (1 + abs(base)),
                    abs(cvar(t * losses, probs, chi) - t * base) / (1 + abs(base)),
                    max(0.0, base - cvar(losses + rng.uniform(0, 1, k), probs, chi)))
    detail(record_property, f"grid oracle {oracle:.1e}, axioms {axiom:.1e}")
    assert oracle <= 1e-6 and axiom <= 1e-10


@pytest.mark.criterion(14, "heterogeneity trend")
def test_heterogeneity_trend(record_property):
    base = generate_bus14(pricing="heterogeneous", seed=1)
    schedule = mean_preserving_schedule(base.n_nodes, 0.4, 8, seed=1)
    vol = sweep_heterogeneity(base, schedule).w_volumes()
    steps = np.diff(vol) >= -1e-6 * np.maximum(1.0, np.abs(vol[:-1]))
    share = float(steps.mean())
    detail(record_property, f"sum|W| {np.round(vol, 2).tolist()}, weakly increasing in {share:.0%} of steps")
    assert share >= 0.8
