"""Prosumer network data: instances, allocations, duals, cost functions and feasibility."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

ROOT = 0


class InstanceError(ValueError):
    """An instance violates a named invariant."""

    def __init__(self, constraint: str, message: str):
        super().__init__(f"[{constraint}] {message}")
        self.constraint = constraint


@dataclass(frozen=True)
class Scenario:
    id: str
    prob: float
    p0: float


@dataclass(frozen=True)
class ScenarioSet:
    scenarios: tuple[Scenario, ...]

    def __post_init__(self):
        if not self.scenarios:
            raise InstanceError("scenario-count", "at least one scenario is required")
        ids = [s.id for s in self.scenarios]
        if len(set(ids)) != len(ids):
            raise InstanceError("scenario-ids", f"scenario ids must be unique, got {ids}")
        probs = self.probs
        if np.any(probs <= 0):
            raise InstanceError("probability-positive", "every scenario probability must be > 0")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise InstanceError(
                "probability-sum", f"scenario probabilities sum to {probs.sum():.15g}, expected 1"
            )

    def __len__(self) -> int:
        return len(self.scenarios)

    @property
    def probs(self) -> np.ndarray:
        return np.array([s.prob for s in self.scenarios], dtype=float)

    @property
    def p0(self) -> np.ndarray:
        return np.array([s.p0 for s in self.scenarios], dtype=float)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.scenarios]


@dataclass(frozen=True)
class ProsumerParams:
    """Per-node parameters.

    ``target_demand`` and ``res`` are per-scenario sequences aligned with the
    instance's scenario order.
    """

    id: int
    d_lo: float
    d_hi: float
    g_lo: float
    g_hi: float
    a: float
    b: float
    a_util: float
    b_util: float
    target_demand: tuple[float, ...]
    res: tuple[float, ...]
    chi: float = 0.0
    d: float = 0.0

    def __post_init__(self):
        if not 0 <= self.d_lo <= self.d_hi:
            raise InstanceError("demand-bounds", f"node {self.id}: need 0 <= D_lo <= D_hi")
        if not 0 <= self.g_lo <= self.g_hi:
            raise InstanceError("generation-bounds", f"node {self.id}: need 0 <= G_lo <= G_hi")
        if self.a <= 0 or self.b < 0 or self.d < 0:
            raise InstanceError("cost-coefficients", f"node {self.id}: need a > 0, b >= 0, d >= 0")
        if self.a_util <= 0:
            raise InstanceError("utility-coefficients", f"node {self.id}: need utility a > 0")
        if not 0 <= self.chi < 1:
            raise InstanceError("risk-attitude", f"node {self.id}: chi must lie in [0, 1)")
        if any(r < 0 for r in self.res):
            raise InstanceError("res-nonnegative", f"node {self.id}: RES generation must be >= 0")


@dataclass(frozen=True)
class EdgeParams:
    """Undirected link ``{i, j}`` with ``i < j``.

    ``b_ij`` is the intercept paid by ``j`` when importing from ``i`` (flow i->j),
    ``b_ji`` the reverse.
    """

    i: int
    j: int
    capacity: float
    a: float = 0.0
    b_ij: float = 1.0
    b_ji: float = 1.0

    def __post_init__(self):
        if self.i >= self.j:
            raise InstanceError("edge-order", f"edge ({self.i}, {self.j}) must satisfy i < j")
        if self.capacity < 0:
            raise InstanceError("capacity", f"edge ({self.i}, {self.j}): capacity must be >= 0")
        if self.a < 0:
            raise InstanceError("congestion-slope", f"edge ({self.i}, {self.j}): a must be >= 0")
        if self.b_ij <= 0 or self.b_ji <= 0:
            raise InstanceError("preference", f"edge ({self.i}, {self.j}): b must be > 0")


@dataclass(frozen=True)
class MarketInstance:
    nodes: tuple[ProsumerParams, ...]
    edges: tuple[EdgeParams, ...]
    scenarios: ScenarioSet
    gamma: tuple[float, ...] | None = None
    meta: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise InstanceError("node-ids", "node ids must be unique")
        if ids != sorted(ids) or ROOT not in ids:
            raise InstanceError("node-ids", "nodes must be sorted by id and include root node 0")
        S = len(self.scenarios)
        for n in self.nodes:
            if len(n.target_demand) != S or len(n.res) != S:
                raise InstanceError(
                    "scenario-data", f"node {n.id}: per-scenario data must have length {S}"
                )
        seen = set()
        for e in self.edges:
            if e.i not in ids or e.j not in ids:
                raise InstanceError("edge-endpoint", f"edge ({e.i}, {e.j}) references unknown node")
            if (e.i, e.j) in seen:
                raise InstanceError("edge-duplicate", f"edge ({e.i}, {e.j}) listed twice")
            seen.add((e.i, e.j))
        for n in ids:
            if n != ROOT and (ROOT, n) not in seen:
                raise InstanceError(
                    "root-neighborhood", f"root node 0 must belong to the neighborhood of node {n}"
                )
        if self.gamma is not None:
            if len(self.gamma) != S:
                raise InstanceError("gamma", f"gamma must have one entry per scenario ({S})")
            if any(g > 1 for g in self.gamma):
                raise InstanceError("gamma", "exogenous contract prices must satisfy gamma <= 1")
        object.__setattr__(self, "_edge_map", {(e.i, e.j): e for e in self.edges})
        object.__setattr__(self, "_pos", {nid: k for k, nid in enumerate(ids)})

    # -- topology -----------------------------------------------------------------

    @property
    def node_ids(self) -> list[int]:
        return [n.id for n in self.nodes]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    def pos(self, node_id: int) -> int:
        return self._pos[node_id]

    def node(self, node_id: int) -> ProsumerParams:
        return self.nodes[self._pos[node_id]]

    def edge(self, m: int, n: int) -> EdgeParams:
        key = (min(m, n), max(m, n))
        try:
            return self._edge_map[key]
        except KeyError:
            raise InstanceError("missing-edge", f"no edge record for ({m}, {n})") from None

    def neighbors(self, n: int) -> list[int]:
        """Neighbours of ``n`` excluding ``n`` itself."""
        out = [e.j for e in self.edges if e.i == n] + [e.i for e in self.edges if e.j == n]
        return sorted(out)

    def flows(self) -> list[tuple[int, int]]:
        """All directed flows ``(m, n)``: energy from m to n, decided by n."""
        out = []
        for e in self.edges:
            out.append((e.i, e.j))
            out.append((e.j, e.i))
        return sorted(out, key=lambda f: (f[1], f[0]))

    def b(self, m: int, n: int) -> float:
        """Preference intercept paid by ``n`` for importing from ``m``."""
        e = self.edge(m, n)
        return e.b_ij if (m, n) == (e.i, e.j) else e.b_ji

    def g_cap(self, n: int) -> float:
        """Generation upper bound including ``G_n <= kappa_nm`` on every incident edge."""
        node = self.node(n)
        caps = [self.edge(n, m).capacity for m in self.neighbors(n)]
        return min([node.g_hi] + caps)

    # -- vectors --------------------------------------------------------------------

    @property
    def chi(self) -> np.ndarray:
        return np.array([n.chi for n in self.nodes])

    @property
    def probs(self) -> np.ndarray:
        return self.scenarios.probs

    def with_chi(self, chi: Iterable[float]) -> "MarketInstance":
        from dataclasses import replace

        chi = list(chi)
        if len(chi) != self.n_nodes:
            raise InstanceError("risk-attitude", "chi vector length must equal node count")
        nodes = tuple(replace(n, chi=float(c)) for n, c in zip(self.nodes, chi))
        return replace(self, nodes=nodes)

    def with_gamma(self, gamma: Iterable[float] | None) -> "MarketInstance":
        from dataclasses import replace

        return replace(self, gamma=None if gamma is None else tuple(float(g) for g in gamma))

    def with_edges(self, **changes) -> "MarketInstance":
        from dataclasses import replace

        return replace(self, edges=tuple(replace(e, **changes) for e in self.edges))


@dataclass
class Allocation:
    """Primal decisions. Arrays are indexed ``[node position, scenario]``."""

    D: np.ndarray
    G: np.ndarray
    q: dict[tuple[int, int], np.ndarray]
    node_ids: list[int]
    eta: np.ndarray | None = None
    u: np.ndarray | None = None
    W: np.ndarray | None = None
    J: np.ndarray | None = None

    @property
    def Q(self) -> np.ndarray:
        out = np.zeros_like(self.D)
        for (m, n), flow in self.q.items():
            out[self.node_ids.index(n)] += flow
        return out

    def copy(self) -> "Allocation":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return Allocation(
            self.D.copy(), self.G.copy(), {k: v.copy() for k, v in self.q.items()},
            list(self.node_ids), cp(self.eta), cp(self.u), cp(self.W), cp(self.J),
        )

    @classmethod
    def zeros(cls, inst: MarketInstance) -> "Allocation":
        N, S = inst.n_nodes, inst.n_scenarios
        return cls(np.zeros((N, S)), np.zeros((N, S)),
                   {f: np.zeros(S) for f in inst.flows()}, inst.node_ids)


@dataclass
class DualBundle:
    """Lagrange multipliers, keyed like :class:`Allocation`.

    Sign convention: ``L = f + y'(Ax - b) + z'(g(x))`` with ``g(x) <= 0`` and
    ``z >= 0``. ``lam`` multiplies ``D - G - Q - dG = 0``; ``xi[(m, n)]`` the
    capacity ``q_mn <= kappa``; ``zeta[(m, n)]`` the reciprocity row as seen by
    the owner of ``q_mn``.
    """

    mu_lo: np.ndarray
    mu_hi: np.ndarray
    nu_lo: np.ndarray
    nu_hi: np.ndarray
    lam: np.ndarray
    xi: dict[tuple[int, int], np.ndarray]
    zeta: dict[tuple[int, int], np.ndarray]
    pi: np.ndarray | None = None
    tau: np.ndarray | None = None
    sigma: np.ndarray | None = None
    phi: np.ndarray | None = None

    def inequality_arrays(self) -> list[np.ndarray]:
        arrs = [self.mu_lo, self.mu_hi, self.nu_lo, self.nu_hi, *self.xi.values(), *self.zeta.values()]
        arrs += [a for a in (self.pi, self.tau, self.sigma) if a is not None]
        return arrs

    def min_inequality_dual(self) -> float:
        return min(float(np.min(a)) for a in self.inequality_arrays())


# -- cost functions ---------------------------------------------------------------------


def production_cost(params: ProsumerParams, G):
    return 0.5 * params.a * G**2 + params.b * G + params.d


def usage_benefit(params: ProsumerParams, D, Dstar):
    return -params.a_util * (D - Dstar) ** 2 + params.b_util


def trading_cost(inst: MarketInstance, n: int, q_in: Mapping[int, float], q_out: Mapping[int, float]) -> float:
    """Trading cost of node ``n``.

    ``q_in[m]`` is ``q_mn`` (n's decision), ``q_out[m]`` is ``q_nm``.
    """
    total = 0.0
    for m, qmn in q_in.items():
        e = inst.edge(m, n)
        total += (e.a * (qmn + q_out[m]) + inst.b(m, n)) * qmn
    return total


def prosumer_cost(inst: MarketInstance, alloc: Allocation, n: int, w: int) -> float:
    k = inst.pos(n)
    node = inst.nodes[k]
    nbrs = inst.neighbors(n)
    q_in = {m: alloc.q[(m, n)][w] for m in nbrs}
    q_out = {m: alloc.q[(n, m)][w] for m in nbrs}
    Q = sum(q_in.values())
    p0 = inst.scenarios.scenarios[w].p0
    return float(
        production_cost(node, alloc.G[k, w])
        + trading_cost(inst, n, q_in, q_out)
        + p0 * Q
        - usage_benefit(node, alloc.D[k, w], node.target_demand[w])
    )


def cost_matrix(inst: MarketInstance, alloc: Allocation) -> np.ndarray:
    """``Pi[n, w]`` for every node position and scenario."""
    return np.array(
        [[prosumer_cost(inst, alloc, n, w) for w in range(inst.n_scenarios)] for n in inst.node_ids]
    )


def social_cost(inst: MarketInstance, alloc: Allocation, w: int) -> float:
    return float(sum(prosumer_cost(inst, alloc, n, w) for n in inst.node_ids))


# -- feasibility ----------------------------------------------------------------------


@dataclass
class Violation:
    constraint: str
    scenario: int
    where: tuple
    amount: float


@dataclass
class FeasibilityReport:
    violations: list[Violation]
    tol: float

    @property
    def feasible(self) -> bool:
        return not self.violations

    @property
    def max_violation(self) -> float:
        return max((v.amount for v in self.violations), default=0.0)

    def __bool__(self) -> bool:
        return self.feasible


def validate_feasible(inst: MarketInstance, alloc: Allocation, tol: float = 1e-6) -> FeasibilityReport:
    out: list[Violation] = []

    def check(name, w, where, amount):
        if amount > tol:
            out.append(Violation(name, w, where, float(amount)))

    Q = alloc.Q
    for w in range(inst.n_scenarios):
        for e in inst.edges:
            i, j = e.i, e.j
            check("reciprocity", w, (i, j), alloc.q[(i, j)][w] + alloc.q[(j, i)][w])
            check("capacity", w, (i, j), alloc.q[(i, j)][w] - e.capacity)
            check("capacity", w, (j, i), alloc.q[(j, i)][w] - e.capacity)
        for k, node in enumerate(inst.nodes):
            n = node.id
            bal = alloc.D[k, w] - alloc.G[k, w] - node.res[w] - Q[k, w]
            check("balance", w, (n,), abs(bal))
            check("demand-lower", w, (n,), node.d_lo - alloc.D[k, w])
            check("demand-upper", w, (n,), alloc.D[k, w] - node.d_hi)
            check("generation-lower", w, (n,), node.g_lo - alloc.G[k, w])
            check("generation-upper", w, (n,), alloc.G[k, w] - node.g_hi)
            for m in inst.neighbors(n):
                check("generation-link-capacity", w, (n, m), alloc.G[k, w] - inst.edge(n, m).capacity)
            if alloc.u is not None:
                check("u-nonnegative", w, (n,), -alloc.u[k, w])
            if alloc.J is not None:
                check("J-nonnegative", w, (n,), -alloc.J[k, w])
        if alloc.W is not None:
            total = alloc.W[:, w].sum() + (alloc.J[:, w].sum() if alloc.J is not None else 0.0)
            check("risk-balance", w, (), abs(total))
    return FeasibilityReport(out, tol)


# -- JSON io ----------------------------------------------------------------------------


def instance_schema() -> dict:
    text = resources.files("p2prisk").joinpath("instance.schema.json").read_text()
    return json.loads(text)


def instance_from_dict(doc: Mapping[str, Any]) -> MarketInstance:
    import jsonschema

    validator = jsonschema.Draft202012Validator(instance_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = [f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors]
        raise InstanceError("schema", "; ".join(lines))

    scen = ScenarioSet(tuple(Scenario(str(s["id"]), float(s["prob"]), float(s["p0"]))
                             for s in doc["scenarios"]))
    nodes = []
    for nd in sorted(doc["nodes"], key=lambda x: x["id"]):
        cost = nd["cost"]
        if "d" not in cost:
            log.info("node %s: production-cost constant d defaulted to 0", nd["id"])
        nodes.append(ProsumerParams(
            id=int(nd["id"]),
            d_lo=float(nd["demand"][0]), d_hi=float(nd["demand"][1]),
            g_lo=float(nd["generation"][0]), g_hi=float(nd["generation"][1]),
            a=float(cost["a"]), b=float(cost["b"]), d=float(cost.get("d", 0.0)),
            a_util=float(nd["utility"]["a"]), b_util=float(nd["utility"].get("b", 0.0)),
            target_demand=tuple(float(v) for v in nd["target_demand"]),
            res=tuple(float(v) for v in nd["res"]),
            chi=float(nd.get("chi", 0.0)),
        ))
    edges = []
    for ed in doc["edges"]:
        i, j = (int(v) for v in ed["nodes"])
        b_fwd, b_bwd = float(ed["b"][0]), float(ed["b"][1])
        if i > j:
            i, j, b_fwd, b_bwd = j, i, b_bwd, b_fwd
        edges.append(EdgeParams(i, j, float(ed["capacity"]), float(ed.get("a", 0.0)), b_fwd, b_bwd))
    edges.sort(key=lambda e: (e.i, e.j))
    gamma = doc.get("gamma")
    return MarketInstance(tuple(nodes), tuple(edges), scen,
                          None if gamma is None else tuple(float(g) for g in gamma),
                          dict(doc.get("meta", {})))


def instance_to_dict(inst: MarketInstance) -> dict:
    doc = {
        "nodes": [
            {
                "id": n.id,
                "demand": [n.d_lo, n.d_hi],
                "generation": [n.g_lo, n.g_hi],
                "cost": {"a": n.a, "b": n.b, "d": n.d},
                "utility": {"a": n.a_util, "b": n.b_util},
                "target_demand": list(n.target_demand),
                "res": list(n.res),
                "chi": n.chi,
            }
            for n in inst.nodes
        ],
        "edges": [
            {"nodes": [e.i, e.j], "capacity": e.capacity, "a": e.a, "b": [e.b_ij, e.b_ji]}
            for e in inst.edges
        ],
        "scenarios": [{"id": s.id, "prob": s.prob, "p0": s.p0} for s in inst.scenarios.scenarios],
        "meta": dict(inst.meta),
    }
    if inst.gamma is not None:
        doc["gamma"] = list(inst.gamma)
    return doc


def load_instance(path: str | Path) -> MarketInstance:
    with open(path) as fh:
        doc = json.load(fh)
    return instance_from_dict(doc)


def save_instance(inst: MarketInstance, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(instance_to_dict(inst), fh, indent=2)
