"""Solve reports and their JSON/CSV serialization."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .cvx import Residuals
from .model import Allocation, DualBundle, MarketInstance, cost_matrix


class SolveError(RuntimeError):
    """A solve ended without an optimal point.

    ``status`` is the solver status; ``family`` names the constraint family
    blamed for infeasibility when it can be identified.
    """

    def __init__(self, status: str, message: str, family: str | None = None):
        super().__init__(message)
        self.status = status
        self.family = family


@dataclass
class EquilibriumReport:
    mode: str
    instance: MarketInstance
    status: str
    allocation: Allocation
    duals: DualBundle
    residuals: Residuals
    objective: float
    iterations: int = 0
    label: str = ""
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    @property
    def costs(self) -> np.ndarray:
        """``Pi[n, w]``: realized cost of each node in each scenario."""
        return cost_matrix(self.instance, self.allocation)

    @property
    def scenario_sc(self) -> np.ndarray:
        return self.costs.sum(axis=0)

    @property
    def expected_sc(self) -> float:
        return float(self.scenario_sc @ self.instance.probs)

    @property
    def node_expected_cost(self) -> np.ndarray:
        return self.costs @ self.instance.probs

    # -- serialization ---------------------------------------------------------------

    def to_dict(self) -> dict:
        a, d = self.allocation, self.duals
        out = {
            "mode": self.mode,
            "status": self.status,
            "label": self.label,
            "objective": self.objective,
            "iterations": self.iterations,
            "residuals": dict(self.residuals._asdict()),
            "expected_sc": self.expected_sc,
            "scenario_sc": self.scenario_sc.tolist(),
            "node_expected_cost": self.node_expected_cost.tolist(),
            "node_ids": list(a.node_ids),
            "D": a.D.tolist(),
            "G": a.G.tolist(),
            "Q": a.Q.tolist(),
            "q": {f"{m}->{n}": v.tolist() for (m, n), v in a.q.items()},
            "lambda": d.lam.tolist(),
            "xi": {f"{m}->{n}": v.tolist() for (m, n), v in d.xi.items()},
            "zeta": {f"{m}->{n}": v.tolist() for (m, n), v in d.zeta.items()},
        }
        for name in ("eta", "u", "W", "J"):
            val = getattr(a, name)
            if val is not None:
                out[name] = val.tolist()
        for name in ("tau", "pi", "sigma", "phi"):
            val = getattr(d, name)
            if val is not None:
                out[name] = val.tolist()
        for k, v in self.extras.items():
            out[k] = _jsonable(v)
        return out

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def write_allocation_csv(self, path: str | Path) -> None:
        """Node rows (D, G, Q, duals, cost), ordered-edge rows (q, xi, zeta) and,
        for contract solves, one scenario row with ``phi``, ``alpha`` and ``gamma``.

        Values are written with ``repr`` so that a reload reproduces them bit for bit.
        """
        a, d, inst = self.allocation, self.duals, self.instance
        costs = self.costs
        extra = [n for n in ("eta", "u", "W", "J") if getattr(a, n) is not None]
        extra_d = [n for n in ("tau", "pi", "sigma") if getattr(d, n) is not None]
        header = ["kind", "scenario", "node", "from", "to", "D", "G", "Q", "lambda", "mu_lo", "mu_hi",
                  "nu_lo", "nu_hi", "cost", *extra, *extra_d, "q", "xi", "zeta"]
        alpha = self.extras.get("alpha")
        if d.phi is not None:
            header += ["phi", "alpha", "gamma"]
        Q = a.Q
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for w, sc in enumerate(inst.scenarios.scenarios):
                for k, n in enumerate(a.node_ids):
                    row = {"kind": "node", "scenario": sc.id, "node": n, "D": a.D[k, w], "G": a.G[k, w],
                           "Q": Q[k, w], "lambda": d.lam[k, w], "mu_lo": d.mu_lo[k, w],
                           "mu_hi": d.mu_hi[k, w], "nu_lo": d.nu_lo[k, w], "nu_hi": d.nu_hi[k, w],
                           "cost": costs[k, w]}
                    for name in extra:
                        arr = getattr(a, name)
                        row[name] = arr[k] if arr.ndim == 1 else arr[k, w]
                    for name in extra_d:
                        row[name] = getattr(d, name)[k, w]
                    wr.writerow([_fmt(row.get(h, "")) for h in header])
                for (m, n), flow in a.q.items():
                    row = {"kind": "edge", "scenario": sc.id, "from": m, "to": n, "q": flow[w],
                           "xi": d.xi[(m, n)][w], "zeta": d.zeta[(m, n)][w]}
                    wr.writerow([_fmt(row.get(h, "")) for h in header])
                if d.phi is not None:
                    row = {"kind": "scenario", "scenario": sc.id, "phi": d.phi[w],
                           "alpha": "" if alpha is None else np.asarray(alpha)[w],
                           "gamma": "" if inst.gamma is None else inst.gamma[w]}
                    wr.writerow([_fmt(row.get(h, "")) for h in header])


def read_allocation_csv(path: str | Path, inst: MarketInstance) -> tuple[Allocation, DualBundle, np.ndarray | None]:
    """Inverse of :meth:`EquilibriumReport.write_allocation_csv`.

    Returns the allocation, the duals and the contract prices ``alpha`` (None
    when the file holds no scenario rows).
    """
    N, S = inst.n_nodes, inst.n_scenarios
    sid = {sc.id: w for w, sc in enumerate(inst.scenarios.scenarios)}
    arrs: dict[str, np.ndarray] = {}
    q = {f: np.zeros(S) for f in inst.flows()}
    xi = {f: np.zeros(S) for f in inst.flows()}
    zeta = {f: np.zeros(S) for f in inst.flows()}
    eta = phi = alpha = None
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        w = sid[row["scenario"]] if row["scenario"] in sid else sid[int(row["scenario"])]
        if row["kind"] == "scenario":
            phi = np.zeros(S) if phi is None else phi
            phi[w] = float(row["phi"])
            if row.get("alpha", "") != "":
                alpha = np.zeros(S) if alpha is None else alpha
                alpha[w] = float(row["alpha"])
        elif row["kind"] == "node":
            k = inst.pos(int(row["node"]))
            for name in ("D", "G", "lambda", "mu_lo", "mu_hi", "nu_lo", "nu_hi", "u", "W", "J",
                         "tau", "pi", "sigma"):
                if row.get(name, "") != "":
                    arrs.setdefault(name, np.zeros((N, S)))[k, w] = float(row[name])
            if row.get("eta", "") != "":
                eta = np.zeros(N) if eta is None else eta
                eta[k] = float(row["eta"])
        else:
            f = (int(row["from"]), int(row["to"]))
            q[f][w] = float(row["q"])
            xi[f][w] = float(row["xi"])
            zeta[f][w] = float(row["zeta"])
    alloc = Allocation(arrs["D"], arrs["G"], q, inst.node_ids, eta, arrs.get("u"), arrs.get("W"), arrs.get("J"))
    duals = DualBundle(arrs["mu_lo"], arrs["mu_hi"], arrs["nu_lo"], arrs["nu_hi"], arrs["lambda"], xi, zeta,
                       arrs.get("pi"), arrs.get("tau"), arrs.get("sigma"), phi)
    return alloc, duals, alpha


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "to_dict"):
        return v.to_dict()
    return v
