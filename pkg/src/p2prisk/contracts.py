"""Scenario-contingent risk contracts: market-completion solves and price regimes.

Each node may buy community contracts ``W`` (either sign, price ``alpha``) and
exogenous contracts ``J >= 0`` (price ``gamma``); payouts ``W + J`` reduce its
scenario loss and ``sum_n (W + J) = 0`` holds per scenario.

Only ``gamma - alpha`` affects the optimum, since ``sum_n alpha W_n`` equals
``-alpha sum_n J_n`` on the balance row. ``alpha`` defaults to
:func:`~p2prisk.formulation.alpha_rule` and is recovered from the duals as
``tau_n - phi``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .averse import (GSTrace, _finish, _require_convex, canonicalize_eta, node_cvar, run_gauss_seidel,
                     solve_centralized_averse)
from .cvx import player_residuals, recover_multipliers, solve
from .formulation import MarketProgram, NonconvexModelError, build, has_trading_curvature
from .model import Allocation, MarketInstance, cost_matrix
from .report import EquilibriumReport, SolveError

log = logging.getLogger(__name__)

J_TOL = 1e-8
EXCESS_TOL = 1e-7


class RegimeClassificationError(RuntimeError):
    """Witnesses contradict every price regime."""


@dataclass
class ContractBook:
    node_ids: list[int]
    scenario_ids: list[str]
    W: np.ndarray
    J: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    phi: np.ndarray
    sigma: np.ndarray
    tau: np.ndarray

    @property
    def balance_residual(self) -> float:
        return float(np.max(np.abs((self.W + self.J).sum(axis=0))))

    @property
    def alpha_recovered(self) -> np.ndarray:
        """``tau_n - phi`` for every node; rows agree at an optimum."""
        return self.tau - self.phi[None, :]

    @property
    def alpha_recovery_residual(self) -> float:
        return float(np.max(np.abs(self.alpha[None, :] - self.alpha_recovered)))

    @property
    def tau_spread(self) -> np.ndarray:
        """Per-scenario ``max_n tau_n - min_n tau_n``."""
        return self.tau.max(axis=0) - self.tau.min(axis=0)

    @property
    def sigma_residual(self) -> float:
        """Largest deviation of ``sigma_n`` from ``gamma - alpha``."""
        return float(np.max(np.abs(self.sigma - (self.gamma - self.alpha)[None, :])))

    def write_csv(self, path: str | Path, labels: list["RegimeLabel"] | None = None) -> None:
        """Node rows for W, J, sigma and tau, then scenario rows for alpha, gamma, phi and regime."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["quantity", "node", *self.scenario_ids])
            for name in ("W", "J", "sigma", "tau"):
                arr = getattr(self, name)
                for k, n in enumerate(self.node_ids):
                    wr.writerow([name, n, *(repr(float(v)) for v in arr[k])])
            for name in ("alpha", "gamma", "phi"):
                wr.writerow([name, "", *(repr(float(v)) for v in getattr(self, name))])
            if labels is not None:
                wr.writerow(["regime", "", *(lab.regime for lab in labels)])


@dataclass
class RegimeLabel:
    """Price regime of one scenario and the data that decided it.

    ``lo``/``hi`` are ``min_n`` and ``max_n`` of ``p / (1 - chi_n)``;
    ``excess[n]`` is ``Pi_n - W_n - J_n - eta_n``.
    """

    scenario: str
    regime: str
    boundary: bool
    gamma: float
    alpha: float
    lo: float
    hi: float
    min_chi_node: int
    j_traders: list[int]
    tau: np.ndarray
    excess: np.ndarray
    notes: list[str] = field(default_factory=list)

    @property
    def branch(self) -> int:
        return int(self.regime[0])

    @property
    def tau_spread(self) -> float:
        return float(self.tau.max() - self.tau.min())


def _excess_case(excess: np.ndarray, tau: np.ndarray, tol: float, notes: list[str]) -> str:
    """Sub-case of the no-exogenous-trade branch from the sign pattern of ``excess``."""
    if np.all(np.abs(excess) <= tol):
        return "2c"
    if np.all(excess <= tol):
        return "2a"
    if np.all(excess >= -tol):
        return "2b"
    # mixed signs are not covered by the case list; fall back on the price conclusion
    notes.append("mixed excess signs; labelled by whether the aligned tau is zero")
    return "2a" if np.max(tau) <= 1e-6 else "2b"


def classify_regime(
    gamma: float,
    p: float,
    chi,
    alpha: float,
    tau,
    J,
    excess,
    node_ids=None,
    scenario: str = "",
    j_tol: float = J_TOL,
    excess_tol: float = EXCESS_TOL,
) -> RegimeLabel:
    """Price regime of one scenario.

    The branch compares ``gamma`` with the thresholds ``lo = p / (1 - min chi)``
    and ``hi = p / (1 - max chi)``; ties go to the lower-numbered branch with
    ``boundary=True``. Within a branch the label follows from whether any node
    buys exogenous cover and from the sign pattern of ``excess``.

    Examples
    --------
    >>> lab = classify_regime(0.40, 1/3, [0.3, 0.4, 0.5], 0.40, [0.4] * 3, [0.0] * 3, [-1.0] * 3)
    >>> lab.regime, round(lab.lo, 5), round(lab.hi, 5)
    ('1b', 0.47619, 0.66667)
    """
    chi = np.asarray(chi, dtype=float)
    tau = np.asarray(tau, dtype=float)
    J = np.asarray(J, dtype=float)
    excess = np.asarray(excess, dtype=float)
    ids = list(range(chi.size)) if node_ids is None else list(node_ids)
    caps = p / (1.0 - chi)
    lo, hi = float(caps.min()), float(caps.max())
    traders = [ids[k] for k in np.nonzero(J > j_tol)[0]]
    notes: list[str] = []
    if alpha > gamma + 1e-9:
        raise RegimeClassificationError(
            f"scenario {scenario}: community price {alpha:.10g} exceeds exogenous price {gamma:.10g}")
    eps = 1e-12 * max(1.0, hi)
    if gamma <= lo + eps:
        boundary = abs(gamma - lo) <= eps
        regime = "1a" if traders else "1b"
        if traders and abs(alpha - gamma) > 1e-7:
            raise RegimeClassificationError(
                f"scenario {scenario}: exogenous cover bought but alpha {alpha:.10g} != gamma {gamma:.10g}")
        if not traders and np.max(tau) > 1e-6:
            notes.append("no exogenous cover yet some tau is positive")
    elif gamma >= hi - eps:
        boundary = abs(gamma - hi) <= eps
        if traders:
            raise RegimeClassificationError(
                f"scenario {scenario}: gamma >= max threshold but nodes {traders} buy exogenous cover")
        regime = _excess_case(excess, tau, excess_tol, notes)
    else:
        boundary = False
        if traders:
            regime = "3a"
            if abs(alpha - gamma) > 1e-7:
                raise RegimeClassificationError(
                    f"scenario {scenario}: exogenous cover bought but alpha {alpha:.10g} != gamma {gamma:.10g}")
        else:
            regime = "3b"
            notes.append("priced as case " + _excess_case(excess, tau, excess_tol, notes))
        # the literal test names a node whose cap is below gamma; its mirror (cap above) is what makes buying pay
        literal = bool(np.any((caps < gamma) & (excess > excess_tol)))
        mirror = bool(np.any((caps > gamma) & (excess > excess_tol)))
        if literal != bool(traders):
            notes.append(f"literal threshold test gives {literal}, exogenous trade is {bool(traders)}")
        if mirror != bool(traders):
            notes.append(f"mirrored threshold test gives {mirror}, exogenous trade is {bool(traders)}")
    return RegimeLabel(scenario, regime, boundary, float(gamma), float(alpha), lo, hi,
                       ids[int(np.argmin(chi))], traders, tau, excess, notes)


# -- canonical contract volumes --------------------------------------------------------


def canonicalize_contracts(inst: MarketInstance, alloc: Allocation, alpha, gamma, slack: float = 1e-12) -> Allocation:
    """Pick a deterministic contract book among the optima at fixed D, G and q.

    Three linear programs: the exact optimal risk objective, then the smallest
    total volume ``sum |W| + sum J`` at that objective, then the least
    exogenous volume ``sum J``. ``eta`` is reset to its smallest optimal value.
    """
    N, S = inst.n_nodes, inst.n_scenarios
    L = cost_matrix(inst, alloc)
    p = inst.probs
    chi = inst.chi
    alpha = np.asarray(alpha, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    # variable layout: eta (N) | u, Wp, Wm, J (N*S each, node-major)
    NS = N * S
    nv = N + 4 * NS
    o_u, o_wp, o_wm, o_j = N, N + NS, N + 2 * NS, N + 3 * NS
    cell = np.arange(NS)
    node_of = cell // S
    scen_of = cell % S

    risk = np.zeros(nv)
    risk[:N] = 1.0
    risk[o_u + cell] = p[scen_of] / (1.0 - chi[node_of])
    risk[o_wp + cell] = alpha[scen_of]
    risk[o_wm + cell] = -alpha[scen_of]
    risk[o_j + cell] = gamma[scen_of]
    # epigraph: L - (Wp - Wm) - J - eta - u <= 0
    rows = np.repeat(cell, 5)
    cols = np.column_stack([node_of, o_u + cell, o_wp + cell, o_wm + cell, o_j + cell]).ravel()
    vals = np.tile([-1.0, -1.0, -1.0, 1.0, -1.0], NS)
    A_ub = sp.csr_matrix((vals, (rows, cols)), shape=(NS, nv))
    b_ub = -L.ravel()
    # balance: sum_n (Wp - Wm + J) = 0 per scenario
    rows = np.repeat(scen_of, 3)
    cols = np.column_stack([o_wp + cell, o_wm + cell, o_j + cell]).ravel()
    vals = np.tile([1.0, -1.0, 1.0], NS)
    A_eq = sp.csr_matrix((vals, (rows, cols)), shape=(S, nv))
    b_eq = np.zeros(S)
    bounds = [(None, None)] * N + [(0, None)] * (4 * NS)
    opts = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}

    def lp(c, A, b):
        res = linprog(c, A_ub=A, b_ub=b, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs", options=opts)
        if res.status != 0:
            raise SolveError("numerical-error", f"contract canonicalization LP failed: {res.message}")
        return res

    r1 = lp(risk, A_ub, b_ub)
    level = r1.fun + slack * max(1.0, abs(r1.fun))
    volume = np.zeros(nv)
    volume[o_wp:] = 1.0
    A2 = sp.vstack([A_ub, sp.csr_matrix(risk)]).tocsr()
    r2 = lp(volume, A2, np.append(b_ub, level))
    vol_level = r2.fun + slack * max(1.0, abs(r2.fun))
    exo = np.zeros(nv)
    exo[o_j:] = 1.0
    A3 = sp.vstack([A2, sp.csr_matrix(volume)]).tocsr()
    r3 = lp(exo, A3, np.concatenate([b_ub, [level, vol_level]]))
    v = r3.x
    out = alloc.copy()
    out.W = (v[o_wp:o_wm] - v[o_wm:o_j]).reshape(N, S)
    out.J = np.maximum(v[o_j:], 0.0).reshape(N, S)
    # push the tiny balance error left by the LP tolerances onto the largest W
    err = (out.W + out.J).sum(axis=0)
    for w in range(S):
        k = int(np.argmax(np.abs(out.W[:, w])))
        out.W[k, w] -= err[w]
    return canonicalize_eta(inst, out)


# -- solves ------------------------------------------------------------------------------


def _book(inst: MarketInstance, rep: EquilibriumReport, alpha, gamma) -> ContractBook:
    a, d = rep.allocation, rep.duals
    return ContractBook(list(inst.node_ids), list(inst.scenarios.ids), a.W.copy(), a.J.copy(),
                        np.asarray(alpha, dtype=float).copy(), np.asarray(gamma, dtype=float).copy(),
                        d.phi.copy(), d.sigma.copy(), d.tau.copy())


def classify_all(inst: MarketInstance, rep: EquilibriumReport, book: ContractBook) -> list[RegimeLabel]:
    a = rep.allocation
    excess = rep.costs - a.W - a.J - a.eta[:, None]
    return [
        classify_regime(book.gamma[w], inst.probs[w], inst.chi, book.alpha[w], book.tau[:, w], book.J[:, w],
                        excess[:, w], inst.node_ids, inst.scenarios.ids[w])
        for w in range(inst.n_scenarios)
    ]


def _require_gamma(inst: MarketInstance) -> None:
    if inst.gamma is None:
        raise ValueError("contract solves need exogenous prices gamma on the instance")


def _contract_extras(book: ContractBook) -> dict:
    return {
        "alpha": book.alpha, "gamma": book.gamma,
        "alpha_recovery_residual": book.alpha_recovery_residual,
        "tau_spread": book.tau_spread, "balance_residual": book.balance_residual,
        "sigma_residual": book.sigma_residual,
    }


def solve_complete_centralized(inst: MarketInstance, tol: float = 1e-9, alpha=None):
    """Risk-averse social program with community and exogenous contracts.

    Returns ``(report, book, labels)`` with one :class:`RegimeLabel` per scenario.
    """
    _require_gamma(inst)
    _require_convex(inst)
    mp = build(inst, risk="averse", contracts=True, alpha=alpha)
    res = solve(mp.program, tol=tol)
    if not res.optimal:
        raise SolveError(res.status, f"contract solve ended with status {res.status}")
    alloc = canonicalize_contracts(inst, mp.allocation(res.x), mp.alpha, mp.gamma)
    x = mp.x_from_allocation(alloc)
    rep = _finish(mp, x, res.y, res.z, res.zq, "contracts-centralized", res.iterations, "social optimum", {})
    book = _book(inst, rep, mp.alpha, mp.gamma)
    labels = classify_all(inst, rep, book)
    rep.extras.update(_contract_extras(book))
    rep.extras["regimes"] = [lab.regime for lab in labels]
    return rep, book, labels


def solve_complete_p2p_gaussseidel(
    inst: MarketInstance,
    rho: float = 1e-2,
    max_sweeps: int | None = None,
    tol: float = 1e-6,
    alpha=None,
    penalty: float | None = None,
):
    """Regularized Gauss-Seidel best responses on the contract game.

    Requires linear trading costs, so that every objective depends on the
    player's own variables only and their sum is an exact potential. Returns
    ``(report, book, trace)``; a run that hits ``max_sweeps`` is reported with
    status ``max-iter``. The shared balance row couples every ``W``, so the
    augmented-Lagrangian ``penalty`` defaults to ``0.6 / N`` and the sweep
    budget to ``max(500, 150 N)``; a fixed penalty stalls on larger networks.
    """
    _require_gamma(inst)
    if has_trading_curvature(inst):
        raise NonconvexModelError("the contract game is a potential game only with linear trading costs (a = 0)")
    mp: MarketProgram = build(inst, risk="averse", design="p2p", contracts=True, alpha=alpha)
    N = inst.n_nodes
    penalty = 0.6 / N if penalty is None else penalty
    max_sweeps = max(500, 150 * N) if max_sweeps is None else max_sweeps
    gs, trace = run_gauss_seidel(mp, rho, max_sweeps, tol, penalty=penalty)
    alloc = canonicalize_contracts(inst, mp.allocation(gs.x), mp.alpha, mp.gamma)
    x = mp.x_from_allocation(alloc)
    y, z, zq = recover_multipliers(mp.game, x)
    rep = _finish(mp, x, y, z, zq, "contracts-gauss-seidel", gs.sweeps, "variational equilibrium",
                  {"gs_trace": trace})
    book = _book(inst, rep, mp.alpha, mp.gamma)
    rep.extras.update(_contract_extras(book))
    rep.extras["zeta_alignment"] = mp.zeta_alignment(x, y, z, zq)
    rep.extras["player_kkt_max"] = max(r.max() for r in player_residuals(mp.game, x, y, z, zq))
    if not gs.converged:
        rep.status = "max-iter"
    return rep, book, trace


# -- welfare ----------------------------------------------------------------------------


@dataclass
class WelfareDelta:
    """Risk objectives with contracts minus without, per node and in total.

    Per-node values depend on which point of a non-unique optimal set each
    solve returns; the aggregate does not.
    """

    node_ids: list[int]
    without: np.ndarray
    with_contracts: np.ndarray
    net_W: np.ndarray
    min_chi_node: int

    @property
    def node_delta(self) -> np.ndarray:
        return self.with_contracts - self.without

    @property
    def aggregate(self) -> float:
        return float(self.with_contracts.sum() - self.without.sum())

    @property
    def sellers(self) -> list[int]:
        """Nodes whose community contract position summed over scenarios is negative."""
        return [n for n, v in zip(self.node_ids, self.net_W) if v < -J_TOL]

    @property
    def min_chi_sells(self) -> bool:
        return self.min_chi_node in self.sellers


def contract_welfare_delta(inst: MarketInstance, tol: float = 1e-9) -> WelfareDelta:
    base = solve_centralized_averse(inst, tol=tol)
    rep, book, _ = solve_complete_centralized(inst, tol=tol)
    with_c = node_cvar(inst, rep.allocation) + (book.W * book.alpha).sum(axis=1) + (book.J * book.gamma).sum(axis=1)
    return WelfareDelta(list(inst.node_ids), node_cvar(inst, base.allocation), with_c, book.W.sum(axis=1),
                        inst.node_ids[int(np.argmin(inst.chi))])


__all__ = [
    "ContractBook", "GSTrace", "RegimeClassificationError", "RegimeLabel", "WelfareDelta",
    "canonicalize_contracts", "classify_all", "classify_regime", "contract_welfare_delta",
    "solve_complete_centralized", "solve_complete_p2p_gaussseidel",
]
