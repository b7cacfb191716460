"""Built-in instance generators, the Gini index and the risk-heterogeneity sweep."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import EdgeParams, MarketInstance, ProsumerParams, Scenario, ScenarioSet

log = logging.getLogger(__name__)

# IEEE 14-bus branch list (1-based bus numbers); bus k becomes node k - 1.
IEEE14_BRANCHES = [
    (1, 2), (1, 5), (2, 3), (2, 4), (2, 5), (3, 4), (4, 5), (4, 7), (4, 9), (5, 6),
    (6, 11), (6, 12), (6, 13), (7, 8), (7, 9), (9, 10), (9, 14), (10, 11), (12, 13), (13, 14),
]


def gamma_from_rule(rule: str, probs: np.ndarray, chi: np.ndarray) -> np.ndarray:
    """``'max-chi'`` gives ``p / (1 - max chi)``; ``'fixed:<v>'`` a constant price."""
    if rule == "max-chi":
        return probs / (1.0 - np.max(chi))
    if rule.startswith("fixed:"):
        return np.full(len(probs), float(rule.split(":", 1)[1]))
    raise ValueError(f"unknown gamma rule {rule!r}")


def generate_threenode(chi: Sequence[float] = (0.0, 0.0, 0.0), variant: str = "conventional",
                       seed: int = 0, gamma_rule: str | None = None) -> MarketInstance:
    """Three-node community: an expensive conventional root and two prosumers with RES.

    Scenario data (targets, RES output, balancing price) is drawn from ``seed``;
    three equiprobable scenarios.
    """
    if variant not in ("conventional", "res-only"):
        raise ValueError(f"unknown variant {variant!r}")
    if len(chi) != 3:
        raise ValueError("chi must have three entries")
    rng = np.random.default_rng(seed)
    S = 3
    Dstar = rng.uniform(3.0, 8.0, size=(3, S))
    res = np.zeros((3, S))
    res[1:] = rng.uniform(1.0, 6.0, size=(2, S))
    p0 = rng.uniform(0.5, 2.0, size=S)
    g_hi = (10.0, 0.0, 0.0) if variant == "res-only" else (10.0, 10.0, 10.0)
    cost = [(4.0, 30.0), (2.0, 10.0), (2.5, 12.0)]
    nodes = tuple(
        ProsumerParams(
            id=n, d_lo=0.0, d_hi=10.0, g_lo=0.0, g_hi=g_hi[n], a=cost[n][0], b=cost[n][1],
            a_util=1.0, b_util=50.0, target_demand=tuple(Dstar[n]), res=tuple(res[n]), chi=float(chi[n]),
        )
        for n in range(3)
    )
    # b_ij is paid by j for energy from i: importing from the root costs 2, selling to it 1
    edges = (
        EdgeParams(0, 1, 10.0, 0.0, b_ij=2.0, b_ji=1.0),
        EdgeParams(0, 2, 10.0, 0.0, b_ij=2.0, b_ji=1.0),
        EdgeParams(1, 2, 5.0, 0.0, b_ij=0.5, b_ji=0.5),
    )
    scen = ScenarioSet(tuple(Scenario(f"w{k}", 1.0 / S, float(p0[k])) for k in range(S)))
    inst = MarketInstance(nodes, edges, scen, meta={"generator": "threenode", "variant": variant, "seed": seed})
    if gamma_rule is not None:
        inst = inst.with_gamma(gamma_from_rule(gamma_rule, inst.probs, inst.chi))
    return inst


def generate_bus14(pricing: str = "uniform", seed: int = 0, n_scenarios: int = 5,
                   chi: Sequence[float] | None = None, gamma_rule: str | None = None) -> MarketInstance:
    """IEEE 14-bus topology with bus 1 as the root, plus a root link to every bus.

    ``pricing='uniform'`` sets every preference price to 1. ``'heterogeneous'``
    draws peer prices in (0.01, 1], root sale prices in [1, 2] and root purchase
    prices equal to 1. All other data are seeded defaults.
    """
    if pricing not in ("uniform", "heterogeneous"):
        raise ValueError(f"unknown pricing {pricing!r}")
    rng = np.random.default_rng(seed)
    N, S = 14, n_scenarios
    chi = np.zeros(N) if chi is None else np.asarray(chi, dtype=float)
    a = rng.uniform(1.0, 4.0, N)
    b = rng.uniform(5.0, 30.0, N)
    a_util = rng.uniform(0.5, 2.0, N)
    Dstar = rng.uniform(3.0, 8.0, size=(N, S))
    res = rng.uniform(0.0, 6.0, size=(N, S))
    res[0] = 0.0
    p0 = rng.uniform(0.5, 2.0, S)
    nodes = tuple(
        ProsumerParams(
            id=n, d_lo=0.0, d_hi=10.0, g_lo=0.0, g_hi=10.0, a=float(a[n]), b=float(b[n]),
            a_util=float(a_util[n]), b_util=50.0, target_demand=tuple(Dstar[n]), res=tuple(res[n]),
            chi=float(chi[n]),
        )
        for n in range(N)
    )
    pairs = {(i - 1, j - 1) for i, j in IEEE14_BRANCHES}
    pairs |= {(0, n) for n in range(1, N)}
    edges = []
    for i, j in sorted(pairs):
        cap = 10.0 if i == 0 else 5.0
        if pricing == "uniform":
            b_ij = b_ji = 1.0
        elif i == 0:
            b_ij, b_ji = float(rng.uniform(1.0, 2.0)), 1.0
        else:
            b_ij, b_ji = (float(1.0 - rng.uniform(0.0, 0.99)) for _ in range(2))
        edges.append(EdgeParams(i, j, cap, 0.0, b_ij=b_ij, b_ji=b_ji))
    scen = ScenarioSet(tuple(Scenario(f"w{k}", 1.0 / S, float(p0[k])) for k in range(S)))
    inst = MarketInstance(nodes, tuple(edges), scen,
                          meta={"generator": "bus14", "pricing": pricing, "seed": seed})
    if gamma_rule is not None:
        inst = inst.with_gamma(gamma_from_rule(gamma_rule, inst.probs, inst.chi))
    return inst


def gini(values) -> float:
    """Gini coefficient ``sum_ij |v_i - v_j| / (2 n sum v)``; 0 for an all-zero vector."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("gini needs a non-empty vector")
    if np.any(v < 0):
        raise ValueError("gini needs non-negative values")
    total = v.sum()
    if total == 0:
        return 0.0
    return float(np.abs(v[:, None] - v[None, :]).sum() / (2 * v.size * total))


def mean_preserving_schedule(n: int, mean: float, steps: int, seed: int, max_spread: float | None = None):
    """Chi vectors ``mean + s * d`` for increasing ``s``: fixed mean, strictly rising Gini.

    ``d`` is a seeded zero-mean direction; the largest spread keeps every entry
    in ``[0, 0.95]``.
    """
    rng = np.random.default_rng(seed)
    d = rng.uniform(-1.0, 1.0, n)
    d -= d.mean()
    lim = min((mean - 0.0) / -d[d < 0].min() if np.any(d < 0) else np.inf,
              (0.95 - mean) / d[d > 0].max() if np.any(d > 0) else np.inf)
    smax = lim if max_spread is None else min(lim, max_spread)
    # clip the rounding error at the extreme spread
    return [np.clip(mean + s * d, 0.0, 0.95) for s in np.linspace(0.0, smax, steps)]


@dataclass
class SweepRow:
    gini: float
    chi: np.ndarray
    node_expected_cost: np.ndarray | None
    w_volume: float
    j_volume: float
    sc: float
    regimes: dict[str, int]
    error: str | None = None


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)

    def w_volumes(self) -> np.ndarray:
        return np.array([r.w_volume for r in self.rows])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["gini", "chi", "sum_abs_W", "sum_J", "expected_sc", "node_expected_cost", "regimes", "error"])
            for r in self.rows:
                wr.writerow([repr(r.gini), " ".join(repr(float(c)) for c in r.chi), repr(r.w_volume),
                             repr(r.j_volume), repr(r.sc),
                             "" if r.node_expected_cost is None else " ".join(repr(float(c)) for c in r.node_expected_cost),
                             " ".join(f"{k}:{v}" for k, v in sorted(r.regimes.items())), r.error or ""])


def sweep_heterogeneity(base: MarketInstance, schedule, gamma_rule: str = "max-chi", tol: float = 1e-9) -> SweepResult:
    """Contract volumes along a chi schedule, one centralized contract solve per point."""
    from .contracts import solve_complete_centralized

    out = SweepResult()
    for chi in schedule:
        chi = np.asarray(chi, dtype=float)
        inst = base.with_chi(chi)
        inst = inst.with_gamma(gamma_from_rule(gamma_rule, inst.probs, inst.chi))
        try:
            rep, book, labels = solve_complete_centralized(inst, tol=tol)
            out.rows.append(SweepRow(
                gini(chi), chi, rep.node_expected_cost, float(np.abs(book.W).sum()), float(book.J.sum()),
                rep.expected_sc, dict(Counter(lab.regime for lab in labels)),
            ))
        except Exception as exc:  # keep sweeping; the failure is recorded in the row
            log.warning("sweep point failed: %s", exc)
            out.rows.append(SweepRow(gini(chi), chi, None, float("nan"), float("nan"), float("nan"), {}, str(exc)))
    out.rows.sort(key=lambda r: r.gini)
    return out
