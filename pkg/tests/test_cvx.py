import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from p2prisk.cvx import (
    ConvexProgram, Game, Player, QuadConstraint, _active_newton, _Dense, _ipm, dual_objective, dump_program, kkt_residuals, player_residuals,
    solve, solve_gne_kkt,
)


def program(P, c, A=None, b=None, G=None, h=None, quads=()):
    n = len(c)
    A = np.zeros((0, n)) if A is None else np.atleast_2d(A)
    G = np.zeros((0, n)) if G is None else np.atleast_2d(G)
    return ConvexProgram(
        n=n, P=sp.csr_matrix(np.atleast_2d(P)), c=np.asarray(c, float), r=0.0,
        A=sp.csr_matrix(A), b=np.zeros(0) if b is None else np.asarray(b, float),
        G=sp.csr_matrix(G), h=np.zeros(0) if h is None else np.asarray(h, float),
        quads=list(quads), blocks={"x": slice(0, n)}, var_keys=list(range(n)),
    )


def test_bound_active():
    # min x^2 s.t. x >= 1
    res = solve(program([[2.0]], [0.0], G=[[-1.0]], h=[-1.0]))
    assert res.optimal
    assert res.x[0] == pytest.approx(1.0, abs=1e-7)
    assert res.z[0] == pytest.approx(2.0, abs=1e-6)


def test_bound_inactive():
    # min (x - 3)^2 s.t. x <= 10
    res = solve(program([[2.0]], [-6.0], G=[[1.0]], h=[10.0]))
    assert res.x[0] == pytest.approx(3.0, abs=1e-7)
    assert res.z[0] == pytest.approx(0.0, abs=1e-7)


def test_degenerate_lp_face():
    # min x + y s.t. x + y = 1, x, y >= 0: any point of the face is optimal
    res = solve(program(np.zeros((2, 2)), [1.0, 1.0], A=[[1.0, 1.0]], b=[1.0], G=-np.eye(2), h=[0.0, 0.0]))
    assert res.optimal
    assert res.objective == pytest.approx(1.0, abs=1e-7)
    assert max(res.residuals) <= 1e-8
    assert res.y[0] == pytest.approx(-1.0, abs=1e-6)


def test_infeasible_detected():
    res = solve(program([[2.0]], [0.0], G=[[1.0], [-1.0]], h=[0.0, -1.0]))
    assert res.status == "infeasible"
    assert not res.optimal


def test_unbounded_detected():
    res = solve(program([[0.0]], [-1.0], G=[[-1.0]], h=[0.0]))
    assert res.status != "optimal"


def test_stationarity_grows_with_perturbation():
    prog = program(np.diag([2.0, 4.0]), [-2.0, 1.0])
    res = solve(prog)
    r = [kkt_residuals(prog, res.x + d * np.array([1.0, 0.0]), res.y, res.z, res.zq).stationarity
         for d in (1e-4, 1e-3)]
    assert r[0] == pytest.approx(2e-4, rel=1e-3)
    assert r[1] / r[0] == pytest.approx(10.0, rel=1e-3)


def test_zero_dual_on_active_constraint():
    prog = program([[2.0]], [0.0], G=[[-1.0]], h=[-1.0])
    res = solve(prog)
    assert kkt_residuals(prog, res.x, res.y, np.zeros(1)).stationarity == pytest.approx(2.0, abs=1e-6)


def test_quadratic_constraint():
    # min -x - y s.t. x^2 + y^2 <= 2
    qc = QuadConstraint(sp.csr_matrix(2 * np.eye(2)), np.zeros(2), 2.0)
    res = solve(program(np.zeros((2, 2)), [-1.0, -1.0], quads=[qc]))
    assert res.x == pytest.approx([1.0, 1.0], abs=1e-6)
    assert res.zq[0] == pytest.approx(0.5, abs=1e-6)


def test_weak_duality_and_scaling():
    rng = np.random.default_rng(3)
    B = rng.normal(size=(4, 4))
    P = B.T @ B + 0.5 * np.eye(4)
    c = rng.normal(size=4)
    G = rng.normal(size=(5, 4))
    h = np.abs(rng.normal(size=5))
    res = solve(program(P, c, G=G, h=h))
    assert dual_objective(program(P, c, G=G, h=h), res.y, res.z) <= res.objective + 1e-9
    scaled = solve(program(3 * P, 3 * c, G=G, h=h))
    assert scaled.x == pytest.approx(res.x, abs=1e-6)
    assert scaled.z == pytest.approx(3 * res.z, abs=1e-6)


def test_deterministic():
    prog = program(np.diag([1.0, 2.0]), [1.0, -1.0], A=[[1.0, 1.0]], b=[0.5], G=-np.eye(2), h=[0.0, 0.0])
    a, b = solve(prog), solve(prog)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and a.iterations == b.iterations


def test_shared_budget_has_one_shadow_price():
    # two players min (x_k - 1)^2 sharing x_1 + x_2 <= 1
    cons = program(np.zeros((2, 2)), np.zeros(2), G=[[1.0, 1.0]], h=[1.0])
    players = [Player(k, np.array([k]), sp.csr_matrix(np.diag([2.0 * (k == 0), 2.0 * (k == 1)])),
                      -2.0 * np.eye(2)[k], 1.0) for k in range(2)]
    game = Game(cons, players, np.zeros(0, int), np.array([-1]), np.zeros(0, int))
    res = solve_gne_kkt(game)
    assert res.x == pytest.approx([0.5, 0.5], abs=1e-7)
    assert res.z[0] == pytest.approx(1.0, abs=1e-6)
    assert max(r.max() for r in player_residuals(game, res.x, res.y, res.z, res.zq)) <= 1e-7
    vi = solve_gne_kkt(game, method="vi")
    assert vi.x == pytest.approx(res.x, abs=1e-6)
    with pytest.raises(NotImplementedError):
        solve_gne_kkt(game, alignment="free")


def test_dump_program(tmp_path):
    qc = QuadConstraint(sp.csr_matrix(2 * np.eye(2)), np.zeros(2), 2.0)
    prog = program(np.eye(2), [1.0, 2.0], A=[[1.0, -1.0]], b=[0.0], quads=[qc])
    path = tmp_path / "prog.txt"
    dump_program(prog, path)
    text = path.read_text().splitlines()
    assert text[0] == "n 2"
    assert "quads 1" in text


@st.composite
def qcqps(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    n = draw(st.integers(2, 5))
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    P = B.T @ B * draw(st.sampled_from([0.0, 0.1, 1.0])) + 1e-2 * np.eye(n)
    c = rng.normal(size=n) * 3
    x0 = rng.normal(size=n)
    G = rng.normal(size=(n + 1, n))
    h = G @ x0 + rng.uniform(0.1, 1.0, n + 1)
    A = rng.normal(size=(1, n))
    b = A @ x0
    L = rng.normal(size=(n, n))
    Q = L.T @ L + np.eye(n)
    r = 0.5 * x0 @ Q @ x0 + rng.uniform(0.5, 3.0)
    return P, c, A, b, G, h, Q, r


@settings(max_examples=25, deadline=None)
@given(qcqps())
def test_matches_cvxpy(data):
    cp = pytest.importorskip("cvxpy")
    P, c, A, b, G, h, Q, r = data
    prog = program(P, c, A=A, b=b, G=G, h=h, quads=[QuadConstraint(sp.csr_matrix(Q), np.zeros(len(c)), r)])
    res = solve(prog, tol=1e-9)
    assert res.optimal
    x = cp.Variable(len(c))
    obj = cp.Minimize(0.5 * cp.quad_form(x, cp.psd_wrap(P)) + c @ x)
    ref = cp.Problem(obj, [A @ x == b, G @ x <= h, 0.5 * cp.quad_form(x, cp.psd_wrap(Q)) <= r])
    ref.solve(solver=cp.CLARABEL)
    assert res.objective == pytest.approx(ref.value, abs=1e-6 * max(1.0, abs(ref.value)))
    assert max(res.residuals) <= 1e-8


def test_active_set_resolve_matches_interior_point():
    rng = np.random.default_rng(5)
    B = rng.normal(size=(4, 4))
    P, G = B.T @ B + np.eye(4), rng.normal(size=(6, 4))
    c, h = rng.normal(size=4) * 3, rng.uniform(0.1, 1.0, 6)
    Q = np.eye(4)
    base = _Dense(P, c, np.ones((1, 4)), [0.2], G, h, [(Q, np.zeros(4), 1.5)])
    x, y, z, st, _ = _ipm(base, 1e-10, 200)
    assert st == "optimal"
    moved = _Dense(P, c + 1e-3, np.ones((1, 4)), [0.2], G, h, [(Q, np.zeros(4), 1.5)])
    hot = _active_newton(moved, 1e-10, x, y, z)
    ref = _ipm(moved, 1e-10, 200)
    assert hot is not None
    assert hot[0] == pytest.approx(ref[0], abs=1e-8)
    # a wrong active set must be rejected rather than returned
    assert _active_newton(moved, 1e-10, x, y, np.ones_like(z)) is None
