"""CVaR, the epigraph market programs and risk-adjusted probabilities."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cvx import Residuals, gauss_seidel, kkt_residuals, player_residuals, recover_multipliers, solve
from .formulation import MarketProgram, NonconvexModelError, build, has_trading_curvature
from .model import Allocation, MarketInstance, cost_matrix
from .report import EquilibriumReport, SolveError

log = logging.getLogger(__name__)


def _check_dist(losses, probs, chi):
    losses = np.asarray(losses, dtype=float)
    probs = np.asarray(probs, dtype=float)
    if losses.size == 0:
        raise ValueError("empty scenario set")
    if losses.shape != probs.shape:
        raise ValueError("losses and probabilities differ in length")
    if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must be non-negative and sum to one")
    if not 0.0 <= chi < 1.0:
        raise ValueError("chi must lie in [0, 1)")
    return losses, probs


def var_lower(losses, probs, chi: float) -> float:
    """Smallest minimizer of the Rockafellar objective over the support.

    This is the lower ``chi``-quantile; for ``chi = 0`` the objective is flat
    below the smallest loss and the smallest loss is returned.
    """
    losses, probs = _check_dist(losses, probs, chi)
    order = np.argsort(losses, kind="stable")
    cdf = np.cumsum(probs[order])
    k = int(np.argmax(cdf >= chi - 1e-12))
    return float(losses[order][k])


def rockafellar(eta, losses, probs, chi: float):
    """``eta + E[(L - eta)^+] / (1 - chi)``, vectorized over ``eta``."""
    eta = np.asarray(eta, dtype=float)
    excess = np.maximum(np.asarray(losses)[None, :] - eta.reshape(-1, 1), 0.0)
    out = eta.reshape(-1) + excess @ np.asarray(probs) / (1.0 - chi)
    return out.reshape(eta.shape)


def cvar(losses, probs, chi: float) -> float:
    """Conditional value at risk of a discrete loss distribution.

    The Rockafellar objective is piecewise linear with kinks at the losses, so
    its minimum is attained at the lower ``chi``-quantile.

    Examples
    --------
    >>> cvar([0.0, 10.0], [0.5, 0.5], 0.5)
    10.0
    """
    losses, probs = _check_dist(losses, probs, chi)
    eta = var_lower(losses, probs, chi)
    return float(eta + probs @ np.maximum(losses - eta, 0.0) / (1.0 - chi))


# -- canonical eta --------------------------------------------------------------------


def canonicalize_eta(inst: MarketInstance, alloc: Allocation) -> Allocation:
    """Replace ``eta`` by its smallest optimal value and ``u`` by the exact excess.

    For fixed decisions the epigraph variables only enter through the
    Rockafellar objective, whose minimizer set is an interval; the smallest
    point is chosen so reports are deterministic.
    """
    out = alloc.copy()
    losses = cost_matrix(inst, alloc)
    if alloc.W is not None:
        losses = losses - alloc.W - alloc.J
    p = inst.probs
    out.eta = np.array([var_lower(losses[k], p, node.chi) for k, node in enumerate(inst.nodes)])
    out.u = np.maximum(losses - out.eta[:, None], 0.0)
    return out


def node_cvar(inst: MarketInstance, alloc: Allocation) -> np.ndarray:
    losses = cost_matrix(inst, alloc)
    if alloc.W is not None:
        losses = losses - alloc.W - alloc.J
    return np.array([cvar(losses[k], inst.probs, node.chi) for k, node in enumerate(inst.nodes)])


def risk_objective(inst: MarketInstance, alloc: Allocation, alpha=None, gamma=None) -> float:
    """Aggregate risk objective: sum of CVaRs plus contract payments."""
    val = float(node_cvar(inst, alloc).sum())
    if alloc.W is not None:
        val += float((alloc.W @ alpha).sum() + (alloc.J @ gamma).sum())
    return val


# -- solves -----------------------------------------------------------------------------


def _finish(mp: MarketProgram, x, y, z, zq, mode, iterations, label, extras) -> EquilibriumReport:
    inst = mp.inst
    alloc = canonicalize_eta(inst, mp.allocation(x))
    xc = mp.x_from_allocation(alloc)
    res = kkt_residuals(mp.program, xc, y, z, zq) if not has_trading_curvature(inst) else Residuals(
        *np.max(np.array(player_residuals(mp.game, xc, y, z, zq)), axis=0))
    duals = mp.duals(y, z, zq)
    objective = mp.program.objective(xc)
    cv = node_cvar(inst, alloc)
    direct = float(cv.sum())
    if mp.contracts:
        direct += float((alloc.W @ mp.alpha).sum() + (alloc.J @ mp.gamma).sum())
    extras = dict(extras)
    extras.update({"cvar": cv, "epigraph_vs_cvar_gap": abs(objective - direct)})
    return EquilibriumReport(mode, inst, "optimal", alloc, duals, res, objective, iterations, label, extras)


def _require_convex(inst: MarketInstance) -> None:
    if has_trading_curvature(inst):
        raise NonconvexModelError(
            "with quadratic trading costs (a > 0) the epigraph constraints are not convex; "
            "use the gauss-seidel peer-to-peer mode"
        )


def solve_centralized_averse(inst: MarketInstance, tol: float = 1e-9) -> EquilibriumReport:
    """Minimize the sum of nodal CVaRs over the joint feasible set (epigraph form)."""
    _require_convex(inst)
    mp = build(inst, risk="averse")
    res = solve(mp.program, tol=tol)
    if not res.optimal:
        raise SolveError(res.status, f"risk-averse solve ended with status {res.status}")
    return _finish(mp, res.x, res.y, res.z, res.zq, "centralized-averse", res.iterations, "social optimum", {})


@dataclass
class GSTrace:
    """Per-sweep history of a Gauss-Seidel run.

    ``merit_start[k]`` and ``merit[k]`` are the augmented potential before and
    after sweep ``k`` under the multipliers of that sweep; ``potential`` is the
    plain sum of objectives.
    """

    displacement: list[float]
    merit: list[float]
    merit_start: list[float]
    potential: list[float]
    epoch: list[int]
    violation: list[float]
    converged: bool
    sweeps: int

    @property
    def merit_increase(self) -> float:
        return max((e - s for s, e in zip(self.merit_start, self.merit)), default=0.0)

    def to_dict(self) -> dict:
        return {"converged": self.converged, "sweeps": self.sweeps, "displacement": self.displacement,
                "merit": self.merit, "merit_start": self.merit_start, "potential": self.potential,
                "violation": self.violation, "merit_increase": self.merit_increase}


def run_gauss_seidel(mp: MarketProgram, rho: float, max_sweeps: int, tol: float, **kw):
    gs = gauss_seidel(mp.game, rho=rho, max_sweeps=max_sweeps, tol=tol, **kw)
    trace = GSTrace(gs.displacement, gs.merit, gs.merit_start, gs.potential, gs.epoch, gs.violation,
                    gs.converged, gs.sweeps)
    return gs, trace


def solve_p2p_averse(
    inst: MarketInstance,
    mode: str = "social-equivalence",
    tol: float = 1e-9,
    rho: float = 1e-2,
    max_sweeps: int = 500,
    gs_tol: float = 1e-6,
) -> EquilibriumReport:
    """Risk-averse peer-to-peer equilibrium.

    ``social-equivalence`` (requires linear trading costs) solves the social
    program and verifies every player's KKT system at the result with the
    shared reciprocity multipliers. ``gauss-seidel`` runs regularized
    best-response sweeps; with quadratic trading costs its output is labelled
    a fixed point whose uniqueness is not established.
    """
    if mode == "social-equivalence":
        _require_convex(inst)
        rep = solve_centralized_averse(inst, tol=tol)
        mp = build(inst, risk="averse", design="p2p")
        y, z, zq = mp.dual_vectors(rep.duals)
        x = mp.x_from_allocation(rep.allocation)
        prs = player_residuals(mp.game, x, y, z, zq)
        rep.mode = "p2p-averse"
        rep.label = "variational equilibrium"
        rep.extras["player_kkt_max"] = max(r.max() for r in prs)
        rep.extras["zeta_alignment"] = mp.zeta_alignment(x, y, z, zq)
        return rep
    if mode != "gauss-seidel":
        raise ValueError(f"unknown mode {mode!r}")
    mp = build(inst, risk="averse", design="p2p")
    gs, trace = run_gauss_seidel(mp, rho, max_sweeps, gs_tol)
    label = "variational equilibrium" if not has_trading_curvature(inst) else "fixed point, uniqueness unverified"
    x = mp.x_from_allocation(canonicalize_eta(inst, mp.allocation(gs.x)))
    y, z, zq = recover_multipliers(mp.game, x)
    rep = _finish(mp, x, y, z, zq, "p2p-averse", gs.sweeps, label, {"gs_trace": trace})
    prs = player_residuals(mp.game, x, y, z, zq)
    rep.extras["player_kkt_max"] = max(r.max() for r in prs)
    rep.extras["zeta_alignment"] = mp.zeta_alignment(x, y, z, zq)
    if not gs.converged:
        rep.status = "max-iter"
    return rep


# -- risk-adjusted probabilities ----------------------------------------------------------


@dataclass
class RiskAdjustedProbabilities:
    """Epigraph duals and their case labels.

    ``labels[n, w]`` is ``'above'`` when the loss exceeds the VaR level
    (``tau = p/(1-chi)``, ``pi = 0``), ``'below'`` when it is smaller
    (``tau = 0``), ``'boundary'`` otherwise.
    """

    tau: np.ndarray
    pi: np.ndarray
    cap: np.ndarray
    excess: np.ndarray
    labels: np.ndarray
    flagged: list[tuple[int, int, str]]
    budget_residual: float

    @property
    def identity_residual(self) -> float:
        return float(np.max(np.abs(self.tau + self.pi - self.cap)))


def extract_tau(report: EquilibriumReport, tol: float = 1e-6, dual_tol: float = 1e-6) -> RiskAdjustedProbabilities:
    inst, a, d = report.instance, report.allocation, report.duals
    if d.tau is None or a.eta is None:
        raise ValueError("report is not risk-averse")
    losses = report.costs
    if a.W is not None:
        losses = losses - a.W - a.J
    excess = losses - a.eta[:, None]
    cap = inst.probs[None, :] / (1.0 - inst.chi[:, None])
    labels = np.where(excess > tol, "above", np.where(excess < -tol, "below", "boundary"))
    flagged = []
    for k, n in enumerate(inst.node_ids):
        for w in range(inst.n_scenarios):
            if labels[k, w] == "above" and (abs(d.tau[k, w] - cap[k, w]) > dual_tol or abs(d.pi[k, w]) > dual_tol):
                flagged.append((n, w, "above threshold but tau below its cap"))
            if labels[k, w] == "below" and abs(d.tau[k, w]) > dual_tol:
                flagged.append((n, w, "below threshold but tau positive"))
    budget = float(np.max(np.abs(d.tau.sum(axis=1) - 1.0)))
    return RiskAdjustedProbabilities(d.tau.copy(), d.pi.copy(), cap, excess, labels, flagged, budget)
