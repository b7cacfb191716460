"""Translate a :class:`MarketInstance` into convex programs and games.

Variable keys
-------------
``("D", n, w)``, ``("G", n, w)``, ``("q", m, n, w)`` (flow m -> n, decided by n),
``("eta", n)``, ``("u", n, w)``, ``("W", n, w)``, ``("J", n, w)``.

Every player (node) owns its D, G, incoming flows and risk variables. The
reciprocity rows and the contract balance rows are shared.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cvx import (ConvexProgram, Expr, Game, Player, ProgramBuilder, SolveResult, dense_vector,
                  player_gradients, project_onto_level_set, sym_matrix)
from .model import Allocation, DualBundle, MarketInstance


class NonconvexModelError(ValueError):
    """The requested centralized program is not convex for this instance."""


@dataclass
class MarketProgram:
    inst: MarketInstance
    scenarios: list[int]
    program: ConvexProgram
    game: Game
    risk: str
    contracts: bool
    design: str
    alpha: np.ndarray | None = None
    gamma: np.ndarray | None = None

    # -- label lookups ---------------------------------------------------------------

    def _rows(self):
        if not hasattr(self, "_row_cache"):
            p = self.program
            self._row_cache = (
                {lab: i for i, lab in enumerate(p.eq_labels)},
                {lab: i for i, lab in enumerate(p.ineq_labels)},
                {lab: i for i, lab in enumerate(p.quad_labels)},
            )
        return self._row_cache

    def allocation(self, x: np.ndarray) -> Allocation:
        inst, S = self.inst, self.scenarios
        N = inst.n_nodes
        ix = self.program.index
        D = np.array([[x[ix(("D", n, w))] for w in S] for n in inst.node_ids])
        G = np.array([[x[ix(("G", n, w))] for w in S] for n in inst.node_ids])
        q = {(m, n): np.array([x[ix(("q", m, n, w))] for w in S]) for m, n in inst.flows()}
        alloc = Allocation(D.reshape(N, len(S)), G.reshape(N, len(S)), q, inst.node_ids)
        if self.risk == "averse":
            alloc.eta = np.array([x[ix(("eta", n))] for n in inst.node_ids])
            alloc.u = np.array([[x[ix(("u", n, w))] for w in S] for n in inst.node_ids])
        if self.contracts:
            alloc.W = np.array([[x[ix(("W", n, w))] for w in S] for n in inst.node_ids])
            alloc.J = np.array([[x[ix(("J", n, w))] for w in S] for n in inst.node_ids])
        return alloc

    def x_from_allocation(self, alloc: Allocation) -> np.ndarray:
        x = np.zeros(self.program.n)
        ix = self.program.index
        for k, n in enumerate(self.inst.node_ids):
            for j, w in enumerate(self.scenarios):
                x[ix(("D", n, w))] = alloc.D[k, j]
                x[ix(("G", n, w))] = alloc.G[k, j]
                if self.risk == "averse" and alloc.u is not None:
                    x[ix(("u", n, w))] = alloc.u[k, j]
                if self.contracts and alloc.W is not None:
                    x[ix(("W", n, w))] = alloc.W[k, j]
                    x[ix(("J", n, w))] = alloc.J[k, j]
            if self.risk == "averse" and alloc.eta is not None:
                x[ix(("eta", n))] = alloc.eta[k]
        for (m, n), flow in alloc.q.items():
            for j, w in enumerate(self.scenarios):
                x[ix(("q", m, n, w))] = flow[j]
        return x

    def duals(self, y: np.ndarray, z: np.ndarray, zq: np.ndarray) -> DualBundle:
        inst, S = self.inst, self.scenarios
        eq, ineq, quad = self._rows()

        def node_arr(vec, rows, name):
            return np.array([[vec[rows[(name, n, w)]] for w in S] for n in inst.node_ids])

        zeta = {}
        for m, n in inst.flows():
            i, j = min(m, n), max(m, n)
            zeta[(m, n)] = np.array([z[ineq[("recip", i, j, w)]] for w in S])
        out = DualBundle(
            mu_lo=node_arr(z, ineq, "D_lo"), mu_hi=node_arr(z, ineq, "D_hi"),
            nu_lo=node_arr(z, ineq, "G_lo"), nu_hi=node_arr(z, ineq, "G_hi"),
            lam=node_arr(y, eq, "balance"),
            xi={(m, n): np.array([z[ineq[("cap", m, n, w)]] for w in S]) for m, n in inst.flows()},
            zeta=zeta,
        )
        if self.risk == "averse":
            out.pi = node_arr(z, ineq, "u_nonneg")
            out.tau = node_arr(zq, quad, "epi")
        if self.contracts:
            out.sigma = node_arr(z, ineq, "J_nonneg")
            out.phi = np.array([y[eq[("risk_balance", w)]] for w in S])
        return out

    def distance_to_optimal_set(self, x: np.ndarray, value: float, slack: float = 1e-7) -> float:
        """Largest D/G/q deviation of ``x`` from the nearest point of the set
        ``{feasible, objective <= value + slack}``.

        Risk-averse optima are generally not unique in the physical allocation,
        so candidates from different methods are compared against the set.
        """
        p = self.program
        mask = np.zeros(p.n)
        for name in ("D", "G", "q"):
            mask[p.blocks[name]] = 1.0
        res = project_onto_level_set(p, x, value + slack, mask)
        if not np.all(np.isfinite(res.x)):
            return float("inf")
        return float(np.max(np.abs(res.x - x) * mask))

    def implied_zeta(self, x, y, z, zq) -> dict[tuple[int, int], np.ndarray]:
        """Reciprocity multiplier that zeroes the buyer's own stationarity in ``q_mn``.

        Both buyers on a link share one row, so at a variational equilibrium the
        two implied values coincide.
        """
        _, ineq, _ = self._rows()
        grads = player_gradients(self.game, x, y, z, zq)
        ix = self.program.index
        out = {}
        for m, n in self.inst.flows():
            k = self.inst.pos(n)
            i, j = min(m, n), max(m, n)
            out[(m, n)] = np.array([z[ineq[("recip", i, j, w)]] - grads[k][ix(("q", m, n, w))]
                                    for w in self.scenarios])
        return out

    def zeta_alignment(self, x, y, z, zq) -> float:
        """Largest disagreement between the two buyers' implied reciprocity multipliers."""
        imp = self.implied_zeta(x, y, z, zq)
        return float(max((np.max(np.abs(imp[(m, n)] - imp[(n, m)])) for m, n in imp), default=0.0))

    def dual_vectors(self, duals: DualBundle) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Inverse of :meth:`duals`."""
        p = self.program
        eq, ineq, quad = self._rows()
        y, z, zq = np.zeros(p.A.shape[0]), np.zeros(p.G.shape[0]), np.zeros(len(p.quads))
        for k, n in enumerate(self.inst.node_ids):
            for j, w in enumerate(self.scenarios):
                z[ineq[("D_lo", n, w)]] = duals.mu_lo[k, j]
                z[ineq[("D_hi", n, w)]] = duals.mu_hi[k, j]
                z[ineq[("G_lo", n, w)]] = duals.nu_lo[k, j]
                z[ineq[("G_hi", n, w)]] = duals.nu_hi[k, j]
                y[eq[("balance", n, w)]] = duals.lam[k, j]
                if self.risk == "averse":
                    z[ineq[("u_nonneg", n, w)]] = duals.pi[k, j]
                    zq[quad[("epi", n, w)]] = duals.tau[k, j]
                if self.contracts:
                    z[ineq[("J_nonneg", n, w)]] = duals.sigma[k, j]
        for (m, n), arr in duals.xi.items():
            for j, w in enumerate(self.scenarios):
                z[ineq[("cap", m, n, w)]] = arr[j]
                i, jj = min(m, n), max(m, n)
                z[ineq[("recip", i, jj, w)]] = duals.zeta[(m, n)][j]
        if self.contracts:
            for j, w in enumerate(self.scenarios):
                y[eq[("risk_balance", w)]] = duals.phi[j]
        return y, z, zq


def cost_expr(b: ProgramBuilder, inst: MarketInstance, n: int, w: int, split_links: bool = False) -> Expr:
    """Per-scenario cost of node ``n`` as a quadratic expression.

    With ``split_links`` the link term of the potential is used instead:
    node n carries ``a q_mn^2 + a/2 q_mn q_nm`` so that the sum over nodes
    of these halves gives the exact potential ``a(q_mn^2 + q_nm^2 + q_mn q_nm)``.
    """
    node = inst.node(n)
    p0 = inst.scenarios.scenarios[w].p0
    Dstar = node.target_demand[w]
    e = Expr(const=node.d - node.b_util + node.a_util * Dstar**2)
    iG, iD = b[("G", n, w)], b[("D", n, w)]
    e.add_square(iG, 0.5 * node.a).add_lin(iG, node.b)
    e.add_square(iD, node.a_util).add_lin(iD, -2 * node.a_util * Dstar)
    for m in inst.neighbors(n):
        edge = inst.edge(m, n)
        i_in, i_out = b[("q", m, n, w)], b[("q", n, m, w)]
        e.add_lin(i_in, inst.b(m, n) + p0)
        if edge.a:
            e.add_square(i_in, edge.a)
            e.add_cross(i_in, i_out, 0.5 * edge.a if split_links else edge.a)
    return e


def alpha_rule(inst: MarketInstance, gamma: Sequence[float]) -> np.ndarray:
    """Community contract price: ``min(gamma, p / (1 - min chi))`` per scenario."""
    return np.minimum(np.asarray(gamma, dtype=float), inst.probs / (1.0 - inst.chi.min()))


def build(
    inst: MarketInstance,
    risk: str = "neutral",
    design: str = "centralized",
    contracts: bool = False,
    scenarios: Sequence[int] | None = None,
    alpha: Sequence[float] | None = None,
) -> MarketProgram:
    """Assemble the joint program and the player decomposition.

    ``risk='neutral'`` minimizes expected costs, ``'averse'`` uses the CVaR
    epigraph. ``design='p2p'`` only changes the neutral objective, which
    becomes the exact potential of the trading game.
    """
    if risk not in ("neutral", "averse"):
        raise ValueError(f"unknown risk {risk!r}")
    if design not in ("centralized", "p2p"):
        raise ValueError(f"unknown design {design!r}")
    if contracts and risk != "averse":
        raise ValueError("contracts require the risk-averse formulation")
    S = list(range(inst.n_scenarios)) if scenarios is None else list(scenarios)
    if risk == "averse" and len(S) != inst.n_scenarios:
        raise ValueError("the risk-averse program couples all scenarios")
    nodes = inst.node_ids
    probs = inst.probs
    b = ProgramBuilder()
    b.add_block("D", [("D", n, w) for w in S for n in nodes])
    b.add_block("G", [("G", n, w) for w in S for n in nodes])
    b.add_block("q", [("q", m, n, w) for w in S for m, n in inst.flows()])
    if risk == "averse":
        b.add_block("eta", [("eta", n) for n in nodes])
        b.add_block("u", [("u", n, w) for w in S for n in nodes])
    gamma = None
    if contracts:
        if inst.gamma is None:
            raise ValueError("contracts need gamma; set it on the instance")
        gamma = np.array(inst.gamma, dtype=float)
        alpha = alpha_rule(inst, gamma) if alpha is None else np.asarray(alpha, dtype=float)
        b.add_block("W", [("W", n, w) for w in S for n in nodes])
        b.add_block("J", [("J", n, w) for w in S for n in nodes])

    owner = {n: k for k, n in enumerate(nodes)}
    eq_own, in_own, q_own = [], [], []

    def eq(coefs, rhs, label, who):
        b.add_eq(coefs, rhs, label)
        eq_own.append(who)

    def ineq(coefs, rhs, label, who):
        b.add_ineq(coefs, rhs, label)
        in_own.append(who)

    for w in S:
        dG = {n: inst.node(n).res[w] for n in nodes}
        for n in nodes:
            node, k = inst.node(n), owner[n]
            iD, iG = b[("D", n, w)], b[("G", n, w)]
            ineq({iD: -1.0}, -node.d_lo, ("D_lo", n, w), k)
            ineq({iD: 1.0}, node.d_hi, ("D_hi", n, w), k)
            ineq({iG: -1.0}, -node.g_lo, ("G_lo", n, w), k)
            ineq({iG: 1.0}, inst.g_cap(n), ("G_hi", n, w), k)
            coefs = {iD: 1.0, iG: -1.0}
            for m in inst.neighbors(n):
                coefs[b[("q", m, n, w)]] = -1.0
            eq(coefs, dG[n], ("balance", n, w), k)
        for m, n in inst.flows():
            ineq({b[("q", m, n, w)]: 1.0}, inst.edge(m, n).capacity, ("cap", m, n, w), owner[n])
        for e in inst.edges:
            ineq({b[("q", e.i, e.j, w)]: 1.0, b[("q", e.j, e.i, w)]: 1.0}, 0.0, ("recip", e.i, e.j, w), -1)

    player_obj = {n: Expr() for n in nodes}
    if risk == "neutral":
        split = design == "p2p"
        for w in S:
            for n in nodes:
                player_obj[n] = player_obj[n] + cost_expr(b, inst, n, w).scaled(probs[w])
        if split:
            obj = Expr()
            for w in S:
                for n in nodes:
                    obj = obj + cost_expr(b, inst, n, w, split_links=True).scaled(probs[w])
        else:
            obj = Expr()
            for n in nodes:
                obj = obj + player_obj[n]
    else:
        for n in nodes:
            k, chi = owner[n], inst.node(n).chi
            e = Expr().add_lin(b[("eta", n)], 1.0)
            for w in S:
                e.add_lin(b[("u", n, w)], probs[w] / (1.0 - chi))
                ineq({b[("u", n, w)]: -1.0}, 0.0, ("u_nonneg", n, w), k)
                epi = cost_expr(b, inst, n, w)
                epi.add_lin(b[("eta", n)], -1.0).add_lin(b[("u", n, w)], -1.0)
                if contracts:
                    j = S.index(w)
                    e.add_lin(b[("W", n, w)], alpha[j]).add_lin(b[("J", n, w)], gamma[j])
                    epi.add_lin(b[("W", n, w)], -1.0).add_lin(b[("J", n, w)], -1.0)
                    ineq({b[("J", n, w)]: -1.0}, 0.0, ("J_nonneg", n, w), k)
                b.add_quad(epi, ("epi", n, w))
                q_own.append(k)
            player_obj[n] = e
        if contracts:
            for w in S:
                coefs = {}
                for n in nodes:
                    coefs[b[("W", n, w)]] = 1.0
                    coefs[b[("J", n, w)]] = 1.0
                eq(coefs, 0.0, ("risk_balance", w), -1)
        obj = Expr()
        for n in nodes:
            obj = obj + player_obj[n]

    b.obj = obj
    prog = b.build()
    players = []
    for n in nodes:
        own = [i for i, key in enumerate(prog.var_keys) if _owner_of(key, inst) == n]
        e = player_obj[n]
        players.append(Player(n, np.array(own, dtype=int), sym_matrix(e.quad, prog.n),
                              dense_vector(e.lin, prog.n), e.const))
    game = Game(prog, players, np.array(eq_own, dtype=int), np.array(in_own, dtype=int),
                np.array(q_own, dtype=int))
    return MarketProgram(inst, S, prog, game, risk, contracts, design,
                         None if alpha is None else np.asarray(alpha, dtype=float), gamma)


def _owner_of(key, inst: MarketInstance) -> int:
    if key[0] == "q":
        return key[2]
    return key[1]


def has_trading_curvature(inst: MarketInstance) -> bool:
    return any(e.a > 0 for e in inst.edges)


def merge_scenarios(inst: MarketInstance, parts: list[tuple[MarketProgram, SolveResult]]):
    """Stitch per-scenario neutral solves into one allocation and dual bundle."""
    S = inst.n_scenarios
    alloc = Allocation.zeros(inst)
    duals = None
    for mp, res in parts:
        (w,) = mp.scenarios
        a = mp.allocation(res.x)
        d = mp.duals(res.y, res.z, res.zq)
        alloc.D[:, w] = a.D[:, 0]
        alloc.G[:, w] = a.G[:, 0]
        for f in alloc.q:
            alloc.q[f][w] = a.q[f][0]
        if duals is None:
            N = inst.n_nodes
            z = lambda: np.zeros((N, S))  # noqa: E731
            duals = DualBundle(z(), z(), z(), z(), z(),
                               {f: np.zeros(S) for f in inst.flows()}, {f: np.zeros(S) for f in inst.flows()})
        for name in ("mu_lo", "mu_hi", "nu_lo", "nu_hi", "lam"):
            getattr(duals, name)[:, w] = getattr(d, name)[:, 0]
        for f in inst.flows():
            duals.xi[f][w] = d.xi[f][0]
            duals.zeta[f][w] = d.zeta[f][0]
    return alloc, duals
