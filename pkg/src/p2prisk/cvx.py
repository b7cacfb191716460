"""Convex QCQP representation, a primal-dual interior-point solver and KKT checks.

Programs have the form::

    min  1/2 x'Px + c'x + r
    s.t. A x = b,  G x <= h,  1/2 x'Q_k x + q_k'x <= r_k

Duals follow ``L = f + y'(Ax - b) + z'(Gx - h) + sum_k zq_k (quad_k(x) - r_k)``
with ``z, zq >= 0``.

The same machinery solves monotone affine variational inequalities: pass
``operator=(M, v)`` and the gradient ``Px + c`` is replaced by ``Mx + v``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Hashable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import linprog

log = logging.getLogger(__name__)


class Residuals(NamedTuple):
    stationarity: float
    feasibility: float
    complementarity: float

    def max(self) -> float:
        return max(self)


@dataclass
class QuadConstraint:
    Q: sp.csr_matrix
    q: np.ndarray
    r: float


@dataclass
class ConvexProgram:
    n: int
    P: sp.csr_matrix
    c: np.ndarray
    r: float
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    quads: list[QuadConstraint]
    blocks: dict[str, slice]
    var_keys: list[Hashable] = field(default_factory=list)
    eq_labels: list[Hashable] = field(default_factory=list)
    ineq_labels: list[Hashable] = field(default_factory=list)
    quad_labels: list[Hashable] = field(default_factory=list)

    def __post_init__(self):
        self._index = {k: i for i, k in enumerate(self.var_keys)}

    def index(self, key: Hashable) -> int:
        return self._index[key]

    def has_var(self, key: Hashable) -> bool:
        return key in self._index

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.c @ x + self.r)

    def quad_values(self, x: np.ndarray) -> np.ndarray:
        return np.array([0.5 * x @ (k.Q @ x) + k.q @ x - k.r for k in self.quads])

    def validate(self) -> None:
        """Check PSD-ness of P and every Q_k and that blocks tile the variable vector."""
        _check_psd(self.P, "objective")
        for lab, k in zip(self.quad_labels or range(len(self.quads)), self.quads):
            _check_psd(k.Q, f"quadratic constraint {lab}")
        covered = np.zeros(self.n, dtype=int)
        for name, sl in self.blocks.items():
            covered[sl] += 1
        if np.any(covered != 1):
            raise ValueError("variable blocks must cover every index exactly once")


def _check_psd(M: sp.spmatrix, what: str) -> None:
    M = sp.csr_matrix(M)
    if M.nnz == 0:
        return
    if abs(M - M.T).max() > 1e-12 * (1 + abs(M).max()):
        raise ValueError(f"{what}: matrix is not symmetric")
    rows = np.unique(M.nonzero()[0])
    if rows.size == 0:
        return
    sub = M[rows][:, rows].toarray()
    ev = np.linalg.eigvalsh(sub)
    if ev[0] < -1e-10 * max(1.0, np.abs(ev).max()):
        raise ValueError(f"{what}: matrix is not positive semidefinite (min eig {ev[0]:.3g})")


class Expr:
    """Quadratic expression ``1/2 x'Qx + l'x + k`` over builder indices."""

    __slots__ = ("quad", "lin", "const")

    def __init__(self, quad=None, lin=None, const=0.0):
        self.quad: dict[tuple[int, int], float] = dict(quad or {})
        self.lin: dict[int, float] = dict(lin or {})
        self.const = float(const)

    def add_lin(self, i: int, v: float) -> "Expr":
        self.lin[i] = self.lin.get(i, 0.0) + v
        return self

    def add_square(self, i: int, v: float) -> "Expr":
        """Add ``v * x_i**2``."""
        self.quad[(i, i)] = self.quad.get((i, i), 0.0) + 2 * v
        return self

    def add_cross(self, i: int, j: int, v: float) -> "Expr":
        """Add ``v * x_i * x_j`` (i != j)."""
        for key in ((i, j), (j, i)):
            self.quad[key] = self.quad.get(key, 0.0) + v
        return self

    def scaled(self, s: float) -> "Expr":
        return Expr({k: s * v for k, v in self.quad.items()},
                    {k: s * v for k, v in self.lin.items()}, s * self.const)

    def __add__(self, other: "Expr") -> "Expr":
        out = Expr(self.quad, self.lin, self.const + other.const)
        for k, v in other.quad.items():
            out.quad[k] = out.quad.get(k, 0.0) + v
        for k, v in other.lin.items():
            out.lin[k] = out.lin.get(k, 0.0) + v
        return out

    def value(self, x: np.ndarray) -> float:
        val = self.const + sum(v * x[i] for i, v in self.lin.items())
        return val + 0.5 * sum(v * x[i] * x[j] for (i, j), v in self.quad.items())


class ProgramBuilder:
    def __init__(self):
        self.keys: list[Hashable] = []
        self.blocks: dict[str, slice] = {}
        self.index: dict[Hashable, int] = {}
        self.obj = Expr()
        self._eq: list[tuple[dict, float, Hashable]] = []
        self._ineq: list[tuple[dict, float, Hashable]] = []
        self._quad: list[tuple[Expr, Hashable]] = []

    def add_block(self, name: str, keys: Iterable[Hashable]) -> None:
        start = len(self.keys)
        for k in keys:
            if k in self.index:
                raise ValueError(f"duplicate variable {k!r}")
            self.index[k] = len(self.keys)
            self.keys.append(k)
        self.blocks[name] = slice(start, len(self.keys))

    def __getitem__(self, key: Hashable) -> int:
        return self.index[key]

    def add_eq(self, coefs: Mapping[int, float], rhs: float, label: Hashable) -> None:
        self._eq.append((dict(coefs), float(rhs), label))

    def add_ineq(self, coefs: Mapping[int, float], rhs: float, label: Hashable) -> None:
        """``coefs . x <= rhs``."""
        self._ineq.append((dict(coefs), float(rhs), label))

    def add_quad(self, expr: Expr, label: Hashable) -> None:
        """``expr(x) <= 0``."""
        self._quad.append((expr, label))

    def build(self) -> ConvexProgram:
        n = len(self.keys)

        def rows(items):
            data, ri, ci, rhs = [], [], [], []
            for r, (coefs, v, _) in enumerate(items):
                for i, a in coefs.items():
                    ri.append(r)
                    ci.append(i)
                    data.append(a)
                rhs.append(v)
            mat = sp.csr_matrix((data, (ri, ci)), shape=(len(items), n))
            return mat, np.array(rhs, dtype=float), [lab for *_, lab in items]

        A, b, eql = rows(self._eq)
        G, h, inl = rows(self._ineq)
        quads = [QuadConstraint(sym_matrix(e.quad, n), dense_vector(e.lin, n), -e.const) for e, _ in self._quad]
        return ConvexProgram(
            n=n, P=sym_matrix(self.obj.quad, n), c=dense_vector(self.obj.lin, n), r=self.obj.const,
            A=A, b=b, G=G, h=h, quads=quads, blocks=dict(self.blocks), var_keys=list(self.keys),
            eq_labels=eql, ineq_labels=inl, quad_labels=[lab for _, lab in self._quad],
        )


def sym_matrix(entries: Mapping[tuple[int, int], float], n: int) -> sp.csr_matrix:
    if not entries:
        return sp.csr_matrix((n, n))
    (ri, ci), vals = zip(*entries.keys()), list(entries.values())
    return sp.csr_matrix((vals, (ri, ci)), shape=(n, n))


def dense_vector(entries: Mapping[int, float], n: int) -> np.ndarray:
    out = np.zeros(n)
    for i, v in entries.items():
        out[i] += v
    return out


# ----------------------------------------------------------------------------------------
# solver
# ----------------------------------------------------------------------------------------


@dataclass
class SolveResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    zq: np.ndarray
    status: str
    objective: float
    residuals: Residuals
    iterations: int
    tol: float

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _quad_pattern(mats):
    coo = [sp.coo_matrix(Q) for Q in mats]
    return (np.concatenate([np.full(c.nnz, i) for i, c in enumerate(coo)]).astype(int),
            np.concatenate([c.row for c in coo]).astype(int),
            np.concatenate([c.col for c in coo]).astype(int),
            np.concatenate([c.data for c in coo]))


class _Dense:
    """Dense program data used inside the Newton loop.

    ``quads`` holds ``(Q, q, r)`` triples with ``Q`` dense or sparse.
    """

    def __init__(self, M, v, A, b, G, h, quads=()):
        self.M = np.asarray(M, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.n = n = self.v.size
        self.A = np.asarray(A, dtype=float).reshape(-1, n)
        self.b = np.asarray(b, dtype=float)
        self.G = np.asarray(G, dtype=float).reshape(-1, n)
        self.h = np.asarray(h, dtype=float)
        self.mq = mq = len(quads)
        if mq:
            self.set_quads(_quad_pattern([Q for Q, _, _ in quads]),
                           [q for _, q, _ in quads], [r for _, _, r in quads])

    def set_quads(self, pattern, lin, r):
        """Install quadratic rows from a precomputed sparsity ``pattern``."""
        self.qk, self.qrow, self.qcol, self.qval = pattern
        self.mq = len(r)
        self.qlin = np.asarray(lin, dtype=float).reshape(self.mq, self.n)
        self.qr = np.asarray(r, dtype=float)

    @classmethod
    def from_program(cls, prog: ConvexProgram, operator=None) -> "_Dense":
        if operator is None:
            M, v = prog.P.toarray(), prog.c
        else:
            M, v = operator
            M = M.toarray() if sp.issparse(M) else M
        return cls(M, v, prog.A.toarray(), prog.b, prog.G.toarray(), prog.h,
                   [(k.Q, k.q, k.r) for k in prog.quads])

    def ineq(self, x):
        """Constraint values ``g(x)`` (feasible iff <= 0) and their Jacobian."""
        lin = self.G @ x - self.h
        if not self.mq:
            return lin, self.G
        Qx = np.zeros((self.mq, self.n))
        np.add.at(Qx, (self.qk, self.qrow), self.qval * x[self.qcol])
        quad = 0.5 * (Qx @ x) + self.qlin @ x - self.qr
        return np.concatenate([lin, quad]), np.vstack([self.G, Qx + self.qlin])

    def hessian(self, zq):
        H = self.M.copy()
        if self.mq:
            np.add.at(H, (self.qrow, self.qcol), self.qval * zq[self.qk])
        return H


def kkt_residuals(program: ConvexProgram, x, y, z, zq=None, operator=None) -> Residuals:
    """Stationarity, primal feasibility and complementarity in the infinity norm."""
    x = np.asarray(x, dtype=float)
    zq = np.zeros(len(program.quads)) if zq is None else np.asarray(zq, dtype=float)
    if x.shape != (program.n,) or len(y) != program.A.shape[0] or len(z) != program.G.shape[0] \
            or len(zq) != len(program.quads):
        raise ValueError("dimension mismatch between program and primal/dual vectors")
    if operator is None:
        grad = program.P @ x + program.c
    else:
        grad = operator[0] @ x + operator[1]
    grad = grad + program.A.T @ y + program.G.T @ z
    for k, zk in zip(program.quads, zq):
        grad = grad + zk * (k.Q @ x + k.q)
    g_lin = program.G @ x - program.h
    g_quad = program.quad_values(x) if program.quads else np.zeros(0)
    g_all = np.concatenate([g_lin, g_quad])
    eq = program.A @ x - program.b
    feas = max(np.max(np.abs(eq), initial=0.0), np.max(g_all, initial=0.0), 0.0)
    comp = np.max(np.abs(np.concatenate([z, zq]) * g_all), initial=0.0)
    return Residuals(float(np.max(np.abs(grad), initial=0.0)), float(feas), float(comp))


def dual_objective(program: ConvexProgram, y, z, zq=None) -> float:
    """Lagrange dual function value; ``-inf`` when the Lagrangian is unbounded below."""
    zq = np.zeros(len(program.quads)) if zq is None else zq
    H = program.P.toarray()
    g = program.c + program.A.T @ y + program.G.T @ z
    const = program.r - program.b @ y - program.h @ z
    for k, zk in zip(program.quads, zq):
        H = H + zk * k.Q.toarray()
        g = g + zk * k.q
        const -= zk * k.r
    xs, *_ = np.linalg.lstsq(H, -g, rcond=None)
    if np.max(np.abs(H @ xs + g), initial=0.0) > 1e-8 * (1 + np.max(np.abs(g), initial=0.0)):
        return -np.inf
    return float(const + 0.5 * g @ xs)


def _linear_feasible(prog: ConvexProgram) -> bool:
    if prog.A.shape[0] == 0 and prog.G.shape[0] == 0:
        return True
    res = linprog(
        np.zeros(prog.n),
        A_ub=prog.G if prog.G.shape[0] else None, b_ub=prog.h if prog.G.shape[0] else None,
        A_eq=prog.A if prog.A.shape[0] else None, b_eq=prog.b if prog.A.shape[0] else None,
        bounds=[(None, None)] * prog.n, method="highs",
    )
    return res.status != 2


def solve(
    program: ConvexProgram,
    tol: float = 1e-8,
    max_iter: int = 200,
    x0: np.ndarray | None = None,
    operator=None,
    check_feasibility: bool = True,
) -> SolveResult:
    """Primal-dual interior-point method (Mehrotra predictor-corrector).

    Parameters
    ----------
    program : ConvexProgram
    tol : float
        Target for all three KKT residuals (absolute, infinity norm).
    max_iter : int
    x0 : ndarray, optional
        Starting primal point; need not be feasible.
    operator : (M, v), optional
        Solve the variational inequality with affine map ``Mx + v`` instead of
        minimizing the objective. ``M`` must be monotone.
    check_feasibility : bool
        Run a linear-programming phase-one check first and report
        ``infeasible`` without iterating.
    """
    n = program.n
    p = program.A.shape[0]
    ml = program.G.shape[0]
    if check_feasibility and not _linear_feasible(program):
        nan = np.full(n, np.nan)
        return SolveResult(nan, np.zeros(p), np.zeros(ml), np.zeros(len(program.quads)),
                           "infeasible", np.nan, Residuals(np.inf, np.inf, np.inf), 0, tol)
    d = _Dense.from_program(program, operator)
    x, y, z, status, it = _ipm(d, tol, max_iter, x0)
    zl, zq = z[:ml], z[ml:]
    res = kkt_residuals(program, x, y, zl, zq, operator)
    if status == "max-iter" and res.max() <= tol:
        status = "optimal"
    if status == "optimal" and res.max() > tol:
        status = "max-iter"
    obj = program.objective(x) if operator is None else float("nan")
    return SolveResult(x, y, zl, zq, status, obj, res, it, tol)


def _max_step(v, dv):
    neg = dv < 0
    if not neg.any():
        return 1.0
    return min(1.0, float((v[neg] / -dv[neg]).min()))


_getrf, _getrs = sla.get_lapack_funcs(("getrf", "getrs"), (np.zeros(1),))


def _active_newton(d: _Dense, tol: float, x, y, z, max_steps: int = 6, act_tol: float = 1e-9):
    """Newton's method on the KKT system of the active set guessed from ``z``.

    Meant for re-solving a slightly perturbed problem from its previous
    primal-dual solution. Returns ``(x, y, z)`` only when the result passes the
    same KKT test as :func:`_ipm` at ``tol``, otherwise ``None``.
    """
    n, p = d.n, d.A.shape[0]
    ml = d.G.shape[0]
    act = np.nonzero(z > act_tol)[0]
    na = act.size
    x, y, za = np.array(x, dtype=float), np.array(y, dtype=float), z[act].copy()
    zf = np.zeros(z.size)
    K = np.zeros((n + p + na, n + p + na))
    K[:n, n:n + p] = d.A.T
    K[n:n + p, :n] = d.A
    for step in range(max_steps + 1):
        g, Jg = d.ineq(x)
        zf[:] = 0.0
        zf[act] = za
        rd = d.M @ x + d.v + d.A.T @ y + Jg.T @ zf
        rp = d.A @ x - d.b
        err = max(np.abs(rd).max(initial=0.0), np.abs(rp).max(initial=0.0), np.abs(g[act]).max(initial=0.0))
        if err <= 0.1 * tol or step == max_steps:
            break
        K[:n, :n] = d.hessian(zf[ml:])
        K[:n, n + p:] = Jg[act].T
        K[n + p:, :n] = Jg[act]
        try:
            sol = np.linalg.solve(K, -np.concatenate([rd, rp, g[act]]))
        except np.linalg.LinAlgError:
            return None
        if not np.isfinite(sol).all():
            return None
        x = x + sol[:n]
        y = y + sol[n:n + p]
        za = za + sol[n + p:]
    if np.any(za < 0):
        return None
    err = max(np.abs(rd).max(initial=0.0), np.abs(rp).max(initial=0.0), g.max(initial=0.0),
              np.abs(zf * g).max(initial=0.0))
    return (x, y, zf) if err <= tol else None


def _ipm(d: _Dense, tol: float, max_iter: int, x0=None, y0=None, z0=None, floor: float = 1.0):
    """Newton loop on dense data. Returns ``(x, y, z, status, iterations)``; ``z``
    stacks linear then quadratic inequality duals.

    ``y0``/``z0`` warm-start the multipliers; slacks and inequality duals start
    at least ``floor`` away from zero.
    """
    n, p = d.n, d.A.shape[0]
    ml = d.G.shape[0]
    m = ml + d.mq
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    y = np.zeros(p) if y0 is None else np.array(y0, dtype=float)
    g, Jg = d.ineq(x)
    s = np.maximum(-g, floor)
    z = np.full(m, floor) if z0 is None else np.maximum(z0, floor)
    reg = 1e-11
    status = "max-iter"
    it = 0
    AT = d.A.T
    K = np.zeros((n + p, n + p))
    K[:n, n:] = AT
    K[n:, :n] = d.A
    dreg = np.concatenate([np.full(n, reg), np.full(p, -reg)])
    diag = np.arange(n + p)
    sc = np.ones(n + p)
    for it in range(1, max_iter + 1):
        g, Jg = d.ineq(x)
        rd = d.M @ x + d.v + AT @ y + Jg.T @ z
        rp = d.A @ x - d.b
        ri = g + s
        err = np.abs(rd).max(initial=0.0)
        if p:
            err = max(err, np.abs(rp).max())
        if m:
            err = max(err, g.max(), np.abs(z * g).max())
        if err <= tol:
            status = "optimal"
            break
        if np.abs(x).max() > 1e10:
            status = "unbounded"
            break
        H = d.hessian(z[ml:])
        K11 = H + Jg.T @ ((z / s)[:, None] * Jg) if m else H
        K[:n, :n] = K11
        # symmetric diagonal scaling, then static regularization of the scaled system
        sc[:n] = 1.0 / np.sqrt(np.clip(np.abs(K11[diag[:n], diag[:n]]), 1.0, 1e8))
        Ks = sc[:, None] * K * sc[None, :]
        Kr = Ks.copy()
        Kr[diag, diag] += dreg
        lu, piv, info = _getrf(Kr)
        if info != 0:
            status = "numerical-error"
            break

        def newton(rc):
            rhs1 = -rd - Jg.T @ ((z * ri - rc) / s) if m else -rd
            rhs = sc * np.concatenate([rhs1, -rp])
            sol = _getrs(lu, piv, rhs)[0]
            # iterative refinement against the unregularized system
            scale = 1e-14 * (1.0 + np.abs(rhs).max())
            for _ in range(10):
                r_ = rhs - Ks @ sol
                if np.abs(r_).max() <= scale:
                    break
                sol = sol + _getrs(lu, piv, r_)[0]
            sol = sc * sol
            dx, dy = sol[:n], sol[n:]
            if m:
                ds = -ri - Jg @ dx
                return dx, dy, ds, (-rc - z * ds) / s
            return dx, dy, None, None

        if not m:
            dx, dy, _, _ = newton(None)
            x, y = x + dx, y + dy
            continue
        mu = s @ z / m
        dx, dy, ds, dz = newton(s * z)
        sz, dsz = np.concatenate([s, z]), np.concatenate([ds, dz])
        a_aff = _max_step(sz, dsz)
        mu_aff = (s + a_aff * ds) @ (z + a_aff * dz) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        # never center below the target accuracy: keeps z/s bounded on degenerate faces
        dx, dy, ds, dz = newton(s * z + ds * dz - max(sigma * mu, 1e-2 * tol))
        dsz = np.concatenate([ds, dz])
        if not np.isfinite(dsz).all() or not np.isfinite(dx).all():
            status = "numerical-error"
            break
        alpha = min(1.0, 0.99 * _max_step(sz, dsz))
        x = x + alpha * dx
        y = y + alpha * dy
        s = np.maximum(s + alpha * ds, 1e-300)
        z = np.maximum(z + alpha * dz, 1e-300)
    return x, y, z, status, it


# ----------------------------------------------------------------------------------------
# games
# ----------------------------------------------------------------------------------------


@dataclass
class Player:
    name: Hashable
    index: np.ndarray
    P: sp.csr_matrix
    c: np.ndarray
    r: float = 0.0

    def cost(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.c @ x + self.r)


@dataclass
class Game:
    """Players with private objectives over a joint variable vector.

    ``constraints`` carries every constraint; the ``*_owner`` arrays give the
    index of the player owning each row, ``-1`` for shared coupling rows.
    """

    constraints: ConvexProgram
    players: list[Player]
    eq_owner: np.ndarray
    ineq_owner: np.ndarray
    quad_owner: np.ndarray

    def __post_init__(self):
        self._pg = None

    @property
    def n(self) -> int:
        return self.constraints.n

    def pseudo_gradient(self) -> tuple[sp.csr_matrix, np.ndarray]:
        """``F(x) = Mx + v`` stacking each player's gradient w.r.t. its own variables."""
        if self._pg is None:
            self._pg = self._assemble_pseudo_gradient()
        return self._pg

    def _assemble_pseudo_gradient(self):
        rows = []
        v = np.zeros(self.n)
        sel = np.zeros(self.n, dtype=int)
        for pl in self.players:
            D = sp.csr_matrix((np.ones(pl.index.size), (pl.index, pl.index)), shape=(self.n, self.n))
            rows.append(D @ pl.P)
            v[pl.index] = pl.c[pl.index]
            sel[pl.index] += 1
        if np.any(sel != 1):
            raise ValueError("player variable sets must partition the joint vector")
        return sp.csr_matrix(sum(rows)), v

    def has_potential(self, atol: float = 1e-12) -> bool:
        if getattr(self, "_sym_flag", None) is not None and atol == 1e-12:
            return self._sym_flag
        M, _ = self.pseudo_gradient()
        diff = abs(M - M.T)
        flag = (diff.max() if diff.nnz else 0.0) <= atol * (1 + (abs(M).max() if M.nnz else 0.0))
        if atol == 1e-12:
            self._sym_flag = flag
        return flag

    def potential(self, x: np.ndarray) -> float:
        """Exact potential ``1/2 x'Mx + v'x`` plus constants when the pseudo-gradient is
        symmetric, otherwise the sum of player costs."""
        if self.has_potential():
            M, v = self.pseudo_gradient()
            return float(0.5 * x @ (M @ x) + v @ x + sum(pl.r for pl in self.players))
        return sum(pl.cost(x) for pl in self.players)

    def _check_private_rows(self) -> None:
        owner_of = np.empty(self.n, dtype=int)
        for k, pl in enumerate(self.players):
            owner_of[pl.index] = k
        for kq, (qc, own) in enumerate(zip(self.constraints.quads, self.quad_owner)):
            if own < 0:
                continue
            touched = np.union1d(np.unique(qc.Q.nonzero()[0]), np.nonzero(qc.q)[0])
            if np.any(owner_of[touched] != own):
                raise ValueError(
                    "a private constraint depends on rivals' variables; the equilibrium is a "
                    "quasi-variational problem, use gauss_seidel instead"
                )


def solve_gne_kkt(
    game: Game,
    alignment: str = "variational",
    method: str = "auto",
    tol: float = 1e-8,
    max_iter: int = 200,
    x0: np.ndarray | None = None,
) -> SolveResult:
    """Variational equilibrium: every player's KKT system with shared multipliers.

    With an exact potential the equivalent single program is solved
    (``method='potential'``); otherwise, or with ``method='vi'``, the monotone
    variational inequality ``<F(x), y - x> >= 0`` is solved directly.
    """
    if alignment == "free":
        raise NotImplementedError("only variational equilibria (aligned shared multipliers) are computed")
    if alignment != "variational":
        raise ValueError(f"unknown alignment {alignment!r}")
    game._check_private_rows()
    M, v = game.pseudo_gradient()
    if method == "auto":
        method = "potential" if game.has_potential() else "vi"
    if method == "potential":
        if not game.has_potential():
            raise ValueError("game has no exact potential")
        Ms = 0.5 * (M + M.T)
        prog = replace(game.constraints, P=sp.csr_matrix(Ms), c=v, r=0.0)
        return solve(prog, tol=tol, max_iter=max_iter, x0=x0)
    if method == "vi":
        res = solve(game.constraints, tol=tol, max_iter=max_iter, x0=x0, operator=(M, v))
        return res
    raise ValueError(f"unknown method {method!r}")


def player_gradients(game: Game, x, y, z, zq) -> list[np.ndarray]:
    """Gradient of each player's Lagrangian, using only rows it owns or shares.

    Only the entries at ``players[k].index`` are meaningful for player ``k``;
    curvature a rival's constraint puts on its variables is ignored.
    """
    prog = game.constraints
    M, v = game.pseudo_gradient()
    base = M @ x + v
    out = []
    for k in range(len(game.players)):
        e_rows = (game.eq_owner == k) | (game.eq_owner < 0)
        i_rows = (game.ineq_owner == k) | (game.ineq_owner < 0)
        q_rows = (game.quad_owner == k) | (game.quad_owner < 0)
        grad = base + prog.A[e_rows].T @ y[e_rows] + prog.G[i_rows].T @ z[i_rows]
        for kq in np.nonzero(q_rows)[0]:
            qc = prog.quads[kq]
            grad = grad + zq[kq] * (qc.Q @ x + qc.q)
        out.append(grad)
    return out


def player_residuals(game: Game, x, y, z, zq) -> list[Residuals]:
    """KKT residuals of each player's own problem with rivals fixed."""
    prog = game.constraints
    eq = prog.A @ x - prog.b
    gl = prog.G @ x - prog.h
    gq = prog.quad_values(x) if prog.quads else np.zeros(0)
    grads = player_gradients(game, x, y, z, zq)
    out = []
    for k, pl in enumerate(game.players):
        e_rows = (game.eq_owner == k) | (game.eq_owner < 0)
        i_rows = (game.ineq_owner == k) | (game.ineq_owner < 0)
        q_rows = (game.quad_owner == k) | (game.quad_owner < 0)
        feas = max(np.max(np.abs(eq[e_rows]), initial=0.0), np.max(gl[i_rows], initial=0.0),
                   np.max(gq[q_rows], initial=0.0), 0.0)
        comp = max(np.max(np.abs(z[i_rows] * gl[i_rows]), initial=0.0),
                   np.max(np.abs(zq[q_rows] * gq[q_rows]), initial=0.0))
        out.append(Residuals(float(np.max(np.abs(grads[k][pl.index]), initial=0.0)), float(feas), float(comp)))
    return out


def recover_multipliers(game: Game, x, active_tol: float = 1e-7):
    """Multipliers that best satisfy every player's stationarity at a fixed ``x``.

    Inequality rows with ``g(x) < -active_tol`` get a zero multiplier; the rest
    are fitted by bounded least squares (nonnegative for inequalities). The
    result measures the KKT accuracy of ``x`` itself, independently of the
    multipliers an iterative method happened to carry.
    """
    from scipy.optimize import lsq_linear

    prog = game.constraints
    M, v = game.pseudo_gradient()
    base = M @ x + v
    gl = prog.G @ x - prog.h
    gq = prog.quad_values(x) if prog.quads else np.zeros(0)
    act_l = np.nonzero(gl >= -active_tol)[0]
    act_q = np.nonzero(gq >= -active_tol)[0]
    cols = [prog.A.T.toarray(), prog.G[act_l].T.toarray()]
    if act_q.size:
        cols.append(np.column_stack([prog.quads[k].Q @ x + prog.quads[k].q for k in act_q]))
    J = np.hstack(cols)
    p = prog.A.shape[0]
    lb = np.concatenate([np.full(p, -np.inf), np.zeros(act_l.size + act_q.size)])
    sol = lsq_linear(J, -base, bounds=(lb, np.inf), method="bvls", tol=1e-14)
    y = sol.x[:p]
    z = np.zeros(prog.G.shape[0])
    z[act_l] = sol.x[p:p + act_l.size]
    zq = np.zeros(len(prog.quads))
    zq[act_q] = sol.x[p + act_l.size:]
    return y, z, zq


def vi_gap(game: Game, xhat: np.ndarray, xs: Sequence[np.ndarray]) -> float:
    """Minimum of ``<F(xhat), x - xhat>`` over the supplied feasible points."""
    M, v = game.pseudo_gradient()
    F = M @ xhat + v
    return float(min(F @ (x - xhat) for x in xs))


def project_onto_level_set(program: ConvexProgram, point: np.ndarray, level: float,
                           mask: np.ndarray | None = None, tol: float = 1e-9) -> SolveResult:
    """Closest point to ``point`` (over the ``mask``ed coordinates) in the
    feasible set of ``program`` with objective at most ``level``.

    With ``level`` equal to the optimal value plus a small slack this measures
    the distance of a candidate to the optimal set, which need not be a single
    point.
    """
    n = program.n
    w = np.ones(n) if mask is None else np.asarray(mask, dtype=float)
    point = np.asarray(point, dtype=float)
    G, h, quads = program.G, program.h, list(program.quads)
    if program.P.nnz == 0:
        G = sp.vstack([G, sp.csr_matrix(program.c.reshape(1, -1))]).tocsr()
        h = np.append(h, level - program.r)
    else:
        quads.append(QuadConstraint(program.P, program.c, level - program.r))
    proj = replace(program, P=sp.diags(w).tocsr(), c=-w * point, r=0.5 * float(w @ point**2),
                   G=G, h=h, quads=quads,
                   ineq_labels=list(program.ineq_labels) + ["level"] * (G.shape[0] - len(program.ineq_labels)),
                   quad_labels=list(program.quad_labels) + ["level"] * (len(quads) - len(program.quad_labels)))
    return solve(proj, tol=tol, x0=point, check_feasibility=False)


# ----------------------------------------------------------------------------------------
# Gauss-Seidel best response
# ----------------------------------------------------------------------------------------


@dataclass
class GaussSeidelResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    zq: np.ndarray
    converged: bool
    sweeps: int
    displacement: list[float]
    merit: list[float]
    potential: list[float]
    epoch: list[int]
    violation: list[float]
    player_status: list[str]
    merit_start: list[float] = field(default_factory=list)

    @property
    def merit_increase(self) -> float:
        """Largest rise of the merit over one sweep, multipliers held fixed."""
        return max((e - s for s, e in zip(self.merit_start, self.merit)), default=0.0)


class _PlayerBlocks:
    """Dense slices of one player's data, cut once before the sweeps."""

    def __init__(self, game: Game, k: int, sh_eq, sh_in):
        prog = game.constraints
        pl = game.players[k]
        n = prog.n
        self.idx = idx = np.asarray(pl.index)
        mask = np.ones(n, dtype=bool)
        mask[idx] = False
        self.rest = rest = np.nonzero(mask)[0]
        self.nk = idx.size
        P = pl.P.tocsr()
        self.Pnn = P[idx][:, idx].toarray()
        self.Pnr = P[idx][:, rest].toarray()
        self.c = np.asarray(pl.c)[idx]
        self.eq_rows = np.nonzero(game.eq_owner == k)[0]
        self.in_rows = np.nonzero(game.ineq_owner == k)[0]
        self.q_rows = np.nonzero(game.quad_owner == k)[0]
        A, G = prog.A.tocsr(), prog.G.tocsr()
        self.A_n, self.A_r = _split(A, self.eq_rows, idx, rest)
        self.b = prog.b[self.eq_rows]
        self.G_n, self.G_r = _split(G, self.in_rows, idx, rest)
        self.h = prog.h[self.in_rows]
        self.As_n, self.As_r = _split(A, sh_eq, idx, rest)
        self.Gs_n, self.Gs_r = _split(G, sh_in, idx, rest)
        # shared rows touching this player, for primal coupling
        self.te = np.nonzero(np.abs(self.As_n).sum(axis=1) > 0)[0]
        self.ti = np.nonzero(np.abs(self.Gs_n).sum(axis=1) > 0)[0]
        self.quads = []
        for kq in self.q_rows:
            qc = prog.quads[kq]
            Q = sp.csr_matrix(qc.Q)
            self.quads.append((Q[idx][:, idx].toarray(), Q[idx][:, rest].toarray(), Q[rest][:, rest],
                               qc.q[idx], qc.q[rest], qc.r))
        self.pattern = _quad_pattern([qd[0] for qd in self.quads]) if self.quads else None


def _split(M, rows, idx, rest):
    sub = M[rows]
    return sub[:, idx].toarray(), sub[:, rest].toarray()


def gauss_seidel(
    game: Game,
    x0: np.ndarray | None = None,
    rho: float = 1e-2,
    max_sweeps: int = 500,
    tol: float = 1e-6,
    coupling: str = "augmented",
    penalty: float = 1.0,
    feas_tol: float = 1e-9,
    epoch_sweeps: int = 1,
    solve_tol: float = 1e-10,
    warm_floor: float = 1e-3,
) -> GaussSeidelResult:
    """Regularized Gauss-Seidel best-response sweeps.

    Each player in turn minimizes its own cost over its private constraints,
    rivals fixed, plus ``rho/2 ||x_n - x_n^prev||^2``.

    ``coupling='augmented'`` prices the shared rows with multipliers common to
    all players (an augmented Lagrangian with ``penalty``), updated between
    epochs of sweeps; its fixed points are variational equilibria. Within an
    epoch the tracked ``merit`` (potential plus augmented terms) is
    non-increasing when the game has an exact potential.

    ``coupling='primal'`` keeps shared rows as hard constraints with rivals'
    variables frozen, which can stall at non-variational equilibria.
    """
    if coupling not in ("augmented", "primal"):
        raise ValueError(f"unknown coupling {coupling!r}")
    prog = game.constraints
    n = prog.n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    sh_eq = np.nonzero(game.eq_owner < 0)[0]
    sh_in = np.nonzero(game.ineq_owner < 0)[0]
    As, bs = prog.A[sh_eq], prog.b[sh_eq]
    Gs, hs = prog.G[sh_in], prog.h[sh_in]
    blocks = [_PlayerBlocks(game, k, sh_eq, sh_in) for k in range(len(game.players))]
    warm = [(None, None)] * len(blocks)
    iters = 0
    y_sh = np.zeros(sh_eq.size)
    z_sh = np.zeros(sh_in.size)
    t = np.maximum(0.0, -(Gs @ x - hs))
    cpen = penalty

    y = np.zeros(prog.A.shape[0])
    z = np.zeros(prog.G.shape[0])
    zq = np.zeros(len(prog.quads))
    disp_trace, merit_trace, pot_trace, epoch_trace, viol_trace = [], [], [], [], []
    start_trace = []
    status = ["unsolved"] * len(game.players)
    converged = False
    epoch, in_epoch = 0, 0

    def merit(x):
        val = game.potential(x)
        if coupling == "augmented":
            re = As @ x - bs
            ri = Gs @ x - hs + t
            val += y_sh @ re + 0.5 * cpen * re @ re + z_sh @ ri + 0.5 * cpen * ri @ ri
        return val

    def violation(x):
        return max(np.max(np.abs(As @ x - bs), initial=0.0), np.max(Gs @ x - hs, initial=0.0), 0.0)

    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        x_start = x.copy()
        start_trace.append(merit(x))
        for k, pb in enumerate(blocks):
            idx, xr = pb.idx, x[pb.rest]
            P = pb.Pnn + rho * np.eye(pb.nk)
            c = pb.c + pb.Pnr @ xr - rho * x[idx]
            A_k, b_k = pb.A_n, pb.b - pb.A_r @ xr
            G_k, h_k = pb.G_n, pb.h - pb.G_r @ xr
            if coupling == "primal":
                A_k = np.vstack([A_k, pb.As_n[pb.te]])
                b_k = np.concatenate([b_k, bs[pb.te] - pb.As_r[pb.te] @ xr])
                G_k = np.vstack([G_k, pb.Gs_n[pb.ti]])
                h_k = np.concatenate([h_k, hs[pb.ti] - pb.Gs_r[pb.ti] @ xr])
            else:
                re_rest = pb.As_r @ xr - bs
                ri_rest = pb.Gs_r @ xr - hs + t
                P = P + cpen * (pb.As_n.T @ pb.As_n + pb.Gs_n.T @ pb.Gs_n)
                c = c + pb.As_n.T @ (y_sh + cpen * re_rest) + pb.Gs_n.T @ (z_sh + cpen * ri_rest)
            d = _Dense(0.5 * (P + P.T), c, A_k, b_k, G_k, h_k)
            if pb.quads:
                d.set_quads(pb.pattern, [q_n + Qnr @ xr for _, Qnr, _, q_n, _, _ in pb.quads],
                            [r - 0.5 * xr @ (Qrr @ xr) - q_r @ xr for _, _, Qrr, _, q_r, r in pb.quads])
            # small moves between sweeps: try the previous active set before a full interior-point solve
            hot = None if warm[k][1] is None else _active_newton(d, solve_tol, x[idx], *warm[k])
            if hot is not None:
                (xk, yk, zk), st, it = hot, "optimal", 1
            else:
                xk, yk, zk, st, it = _ipm(d, solve_tol, 200, x[idx], warm[k][0], warm[k][1],
                                          warm_floor if warm[k][1] is not None else 1.0)
            iters += it
            warm[k] = (yk, zk)
            status[k] = st
            if not np.all(np.isfinite(xk)):
                raise RuntimeError(f"best response of player {game.players[k].name} failed: {st}")
            x[idx] = xk
            y[pb.eq_rows] = yk[: pb.eq_rows.size]
            z[pb.in_rows] = zk[: pb.in_rows.size]
            zq[pb.q_rows] = zk[G_k.shape[0]:]
            if coupling == "augmented":
                t = np.maximum(0.0, -(Gs @ x - hs) - z_sh / cpen)

        disp = float(np.max(np.abs(x - x_start), initial=0.0))
        viol = violation(x)
        disp_trace.append(disp)
        merit_trace.append(merit(x))
        pot_trace.append(game.potential(x))
        epoch_trace.append(epoch)
        viol_trace.append(viol)
        in_epoch += 1
        if coupling == "primal":
            if disp <= tol:
                converged = True
                break
            continue
        if disp <= tol and viol <= feas_tol:
            converged = True
            break
        if disp <= max(tol, 0.1 * viol) or in_epoch >= epoch_sweeps:
            y_sh = y_sh + cpen * (As @ x - bs)
            z_sh = np.maximum(0.0, z_sh + cpen * (Gs @ x - hs))
            t = np.maximum(0.0, -(Gs @ x - hs) - z_sh / cpen)
            epoch += 1
            in_epoch = 0

    if coupling == "augmented":
        # report the multipliers the last best responses actually saw
        y[sh_eq] = y_sh + cpen * (As @ x - bs)
        z[sh_in] = np.maximum(0.0, z_sh + cpen * (Gs @ x - hs))
    return GaussSeidelResult(x, y, z, zq, converged, sweep, disp_trace, merit_trace, pot_trace,
                             epoch_trace, viol_trace, status, start_trace)


# ----------------------------------------------------------------------------------------


def dump_program(program: ConvexProgram, path) -> None:
    """Plain-text dump with sparse triplets, for cross-checking with external tools."""

    def triplets(fh, name, M):
        M = sp.coo_matrix(M)
        fh.write(f"{name} {M.shape[0]} {M.shape[1]} {M.nnz}\n")
        for i, j, v in zip(M.row, M.col, M.data):
            fh.write(f"{i} {j} {v!r}\n")

    def vector(fh, name, v):
        fh.write(f"{name} {len(v)}\n")
        for val in v:
            fh.write(f"{float(val)!r}\n")

    with open(path, "w") as fh:
        fh.write(f"n {program.n}\n")
        for name, sl in program.blocks.items():
            fh.write(f"block {name} {sl.start} {sl.stop}\n")
        triplets(fh, "P", program.P)
        vector(fh, "c", program.c)
        fh.write(f"r {program.r!r}\n")
        triplets(fh, "A", program.A)
        vector(fh, "b", program.b)
        triplets(fh, "G", program.G)
        vector(fh, "h", program.h)
        fh.write(f"quads {len(program.quads)}\n")
        for k, qc in enumerate(program.quads):
            triplets(fh, f"Q{k}", qc.Q)
            vector(fh, f"q{k}", qc.q)
            fh.write(f"r{k} {qc.r!r}\n")
