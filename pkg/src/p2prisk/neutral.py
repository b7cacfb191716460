"""Risk-neutral market designs: centralized optimum and peer-to-peer variational equilibrium."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cvx import Residuals, player_residuals, solve, solve_gne_kkt
from .formulation import build, merge_scenarios
from .model import Allocation, MarketInstance
from .report import EquilibriumReport, SolveError

log = logging.getLogger(__name__)

ROOT = 0


def diagnose_infeasibility(inst: MarketInstance, w: int) -> str:
    """Name the constraint family that makes scenario ``w`` infeasible, when a simple bound shows it."""
    for n in inst.node_ids:
        node = inst.node(n)
        inflow = sum(inst.edge(m, n).capacity for m in inst.neighbors(n))
        supply = inst.g_cap(n) + node.res[w] + inflow
        if node.d_lo > supply + 1e-12:
            return f"balance: node {n} demand lower bound {node.d_lo} exceeds generation + RES + import capacity {supply}"
        if node.g_lo > inst.g_cap(n) + 1e-12:
            return f"generation bounds: node {n} lower bound {node.g_lo} exceeds link-limited cap {inst.g_cap(n)}"
    return "balance/capacity system"


def _scenario_start(x0: Allocation | None, mp, w):
    if x0 is None:
        return None
    part = Allocation(x0.D[:, [w]], x0.G[:, [w]], {f: v[[w]] for f, v in x0.q.items()}, x0.node_ids)
    return mp.x_from_allocation(part)


def _solve_neutral(inst: MarketInstance, design: str, tol: float, x0, method: str):
    parts, worst, iters, objective = [], Residuals(0.0, 0.0, 0.0), 0, 0.0
    prs, align = [], 0.0
    for w in range(inst.n_scenarios):
        mp = build(inst, risk="neutral", design=design, scenarios=[w])
        start = _scenario_start(x0, mp, w)
        if design == "centralized":
            res = solve(mp.program, tol=tol, x0=start)
        else:
            res = solve_gne_kkt(mp.game, method=method, tol=tol, x0=start)
        if not res.optimal:
            family = diagnose_infeasibility(inst, w) if res.status == "infeasible" else None
            raise SolveError(res.status, f"scenario {inst.scenarios.ids[w]}: solver status {res.status}", family)
        parts.append((mp, res))
        worst = Residuals(*np.maximum(worst, res.residuals))
        iters += res.iterations
        objective += res.objective if design == "centralized" else mp.game.potential(res.x)
        if design == "p2p":
            prs.extend(player_residuals(mp.game, res.x, res.y, res.z, res.zq))
            align = max(align, mp.zeta_alignment(res.x, res.y, res.z, res.zq))
    alloc, duals = merge_scenarios(inst, parts)
    return alloc, duals, worst, iters, objective, prs, align


def solve_centralized_neutral(inst: MarketInstance, tol: float = 1e-9, x0: Allocation | None = None) -> EquilibriumReport:
    """Minimize expected social cost; scenarios are solved independently."""
    alloc, duals, res, iters, obj, _, _ = _solve_neutral(inst, "centralized", tol, x0, "potential")
    return EquilibriumReport("centralized-neutral", inst, "optimal", alloc, duals, res, obj, iters,
                             label="social optimum")


def solve_p2p_neutral(
    inst: MarketInstance, tol: float = 1e-9, x0: Allocation | None = None, method: str = "potential"
) -> EquilibriumReport:
    """Variational equilibrium of the trading game.

    ``method='potential'`` minimizes the exact potential; ``method='vi'``
    solves the stacked player KKT system directly. ``objective`` is the
    potential value.
    """
    alloc, duals, res, iters, obj, prs, align = _solve_neutral(inst, "p2p", tol, x0, method)
    worst_player = max((r.max() for r in prs), default=0.0)
    return EquilibriumReport("p2p-neutral", inst, "optimal", alloc, duals, res, obj, iters,
                             label="variational equilibrium",
                             extras={"player_kkt_max": worst_player, "zeta_alignment": align})


# -- nodal prices -------------------------------------------------------------------------


@dataclass
class NodalPriceTable:
    """Decomposition of nodal prices relative to the root node.

    ``lam[n, w] = lam0[w] + xi_in[n, w] - xi_out[n, w] + preference[n, w] + asymmetry[n, w]``
    where ``xi_in`` is the capacity dual of the import flow 0 -> n and
    ``xi_out`` that of the export flow n -> 0.
    """

    node_ids: list[int]
    lam: np.ndarray
    lam0: np.ndarray
    xi_in: np.ndarray
    xi_out: np.ndarray
    preference: np.ndarray
    asymmetry: np.ndarray

    @property
    def reconstructed(self) -> np.ndarray:
        return self.lam0[None, :] + self.xi_in - self.xi_out + self.preference + self.asymmetry

    @property
    def residual(self) -> float:
        return float(np.max(np.abs(self.lam - self.reconstructed)))


def _price_table(report: EquilibriumReport, include_asymmetry: bool) -> NodalPriceTable:
    inst, a, d = report.instance, report.allocation, report.duals
    if d.lam is None:
        raise ValueError("report carries no balance duals")
    p = inst.probs
    N, S = d.lam.shape
    k0 = inst.pos(ROOT)
    xi_in, xi_out, pref, asym = (np.zeros((N, S)) for _ in range(4))
    for k, n in enumerate(inst.node_ids):
        if n == ROOT:
            continue
        xi_in[k] = d.xi[(ROOT, n)]
        xi_out[k] = d.xi[(n, ROOT)]
        pref[k] = p * (inst.b(ROOT, n) - inst.b(n, ROOT))
        if include_asymmetry:
            asym[k] = p * inst.edge(ROOT, n).a * (a.q[(ROOT, n)] - a.q[(n, ROOT)])
    return NodalPriceTable(list(inst.node_ids), d.lam.copy(), d.lam[k0].copy(), xi_in, xi_out, pref, asym)


def extract_nodal_prices_centralized(report: EquilibriumReport) -> NodalPriceTable:
    return _price_table(report, include_asymmetry=False)


def extract_nodal_prices_p2p(report: EquilibriumReport) -> NodalPriceTable:
    return _price_table(report, include_asymmetry=True)


# -- closed forms -------------------------------------------------------------------------


@dataclass
class ClosedFormResiduals:
    D: np.ndarray
    G: np.ndarray
    Q: np.ndarray

    @property
    def max(self) -> float:
        return float(max(np.max(np.abs(self.D)), np.max(np.abs(self.G)), np.max(np.abs(self.Q))))


def closed_form_values(report: EquilibriumReport) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """D, G and Q rebuilt from the nodal prices and bound duals of a neutral solve."""
    inst, d = report.instance, report.duals
    p = inst.probs[None, :]
    at = np.array([n.a_util for n in inst.nodes])[:, None]
    a = np.array([n.a for n in inst.nodes])[:, None]
    b = np.array([n.b for n in inst.nodes])[:, None]
    Dstar = np.array([n.target_demand for n in inst.nodes])
    res = np.array([n.res for n in inst.nodes])
    D = Dstar - (d.lam + d.mu_hi - d.mu_lo) / (2 * p * at)
    G = -b / a + (d.lam - (d.nu_hi - d.nu_lo)) / (p * a)
    Q = (Dstar - (d.mu_hi - d.mu_lo) / (2 * p * at) + b / a + (d.nu_hi - d.nu_lo) / (p * a)
         - (1 / (2 * p * at) + 1 / (p * a)) * d.lam - res)
    return D, G, Q


def closed_form_check(report: EquilibriumReport) -> ClosedFormResiduals:
    D, G, Q = closed_form_values(report)
    a = report.allocation
    return ClosedFormResiduals(a.D - D, a.G - G, a.Q - Q)


# -- no surplus ---------------------------------------------------------------------------


@dataclass
class NoSurplusCertificate:
    """Per-scenario surplus diagnostics.

    ``holds[w]`` is true when no energy is wasted (``sum_n Q_n`` is zero up to
    tolerance). ``lambda0_bound`` is the root-price threshold implied by the
    closed forms; ``slack = lambda0 - lambda0_bound`` is zero exactly when no
    energy is wasted and positive otherwise.
    """

    net_import: np.ndarray
    lambda0: np.ndarray
    lambda0_bound: np.ndarray
    slack: np.ndarray
    holds: np.ndarray
    bound_satisfied: np.ndarray
    necessary_condition: np.ndarray
    tol: float


def no_surplus_certificate(report: EquilibriumReport, tol: float = 1e-8) -> NoSurplusCertificate:
    inst, a, d = report.instance, report.allocation, report.duals
    p = inst.probs
    table = _price_table(report, include_asymmetry=False)
    at = np.array([n.a_util for n in inst.nodes])[:, None]
    an = np.array([n.a for n in inst.nodes])[:, None]
    bn = np.array([n.b for n in inst.nodes])[:, None]
    Dstar = np.array([n.target_demand for n in inst.nodes])
    res = np.array([n.res for n in inst.nodes])
    c = 1 / (2 * p * at) + 1 / (p * an)
    K = Dstar - (d.mu_hi - d.mu_lo) / (2 * p * at) + bn / an + (d.nu_hi - d.nu_lo) / (p * an) - res
    delta = table.xi_in - table.xi_out + table.preference
    bound = (K - c * delta).sum(axis=0) / c.sum(axis=0)
    lam0 = table.lam0
    netQ = a.Q.sum(axis=0)
    return NoSurplusCertificate(
        net_import=netQ,
        lambda0=lam0,
        lambda0_bound=bound,
        slack=lam0 - bound,
        holds=np.abs(netQ) <= tol,
        bound_satisfied=lam0 >= bound - tol,
        necessary_condition=np.any(a.D - a.G >= res - tol, axis=0),
        tol=tol,
    )


# -- design comparison --------------------------------------------------------------------


@dataclass
class DesignComparison:
    price_gap: np.ndarray
    predicted_gap: np.ndarray
    decomposition_gap: np.ndarray
    trade_asymmetry: np.ndarray
    sc_gap: float
    sc_ratio: float
    centralized: EquilibriumReport
    p2p: EquilibriumReport


def compare_designs(inst: MarketInstance, tol: float = 1e-9) -> DesignComparison:
    """Nodal-price and efficiency differences between the two risk-neutral designs.

    ``decomposition_gap`` is the p2p price minus the centralized decomposition evaluated
    at the p2p duals; it equals ``predicted_gap`` identically.
    """
    cent = solve_centralized_neutral(inst, tol=tol)
    p2p = solve_p2p_neutral(inst, tol=tol)
    table = extract_nodal_prices_p2p(p2p)
    recon_cent = _price_table(p2p, include_asymmetry=False).reconstructed
    asym = np.zeros_like(table.lam)
    for k, n in enumerate(inst.node_ids):
        if n != ROOT:
            asym[k] = p2p.allocation.q[(ROOT, n)] - p2p.allocation.q[(n, ROOT)]
    sc_c, sc_p = cent.expected_sc, p2p.expected_sc
    return DesignComparison(
        price_gap=p2p.duals.lam - cent.duals.lam,
        predicted_gap=table.asymmetry,
        decomposition_gap=p2p.duals.lam - recon_cent,
        trade_asymmetry=asym,
        sc_gap=sc_p - sc_c,
        sc_ratio=sc_p / sc_c if sc_c != 0 else float("nan"),
        centralized=cent,
        p2p=p2p,
    )
