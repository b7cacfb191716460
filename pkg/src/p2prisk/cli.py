"""Command-line driver: load or generate an instance, solve it, write tables and checks."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cvx import Residuals, kkt_residuals, player_residuals
from .experiments import (gamma_from_rule, generate_bus14, generate_threenode, mean_preserving_schedule,
                          sweep_heterogeneity)
from .formulation import NonconvexModelError, build, has_trading_curvature
from .model import InstanceError, MarketInstance, load_instance, save_instance, validate_feasible
from .report import EquilibriumReport, SolveError, read_allocation_csv

log = logging.getLogger("p2prisk")

MODES = ("centralized-neutral", "p2p-neutral", "centralized-averse", "p2p-averse",
         "contracts-centralized", "contracts-gauss-seidel")

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_VERIFY = 0, 2, 3, 4


@dataclass
class ExperimentConfig:
    mode: str
    out: Path
    instance: Path | None = None
    generator: str | None = None
    seed: int | None = None
    chi: list[float] | None = None
    gamma_rule: str | None = None
    tol: float = 1e-9
    verify_tol: float = 1e-6
    variant: str = "conventional"
    pricing: str = "uniform"
    n_scenarios: int = 5
    p2p_method: str = "social-equivalence"
    verify: bool = True

    def validate(self) -> None:
        if self.mode not in MODES:
            raise InstanceError("config", f"unknown mode {self.mode!r}")
        if (self.instance is None) == (self.generator is None):
            raise InstanceError("config", "give exactly one of --instance and --generator")
        if self.generator is not None:
            if self.generator not in ("threenode", "bus14"):
                raise InstanceError("config", f"unknown generator {self.generator!r}")
            if self.seed is None:
                raise InstanceError("config", "randomized generators need --seed")
        if self.chi is not None and any(not 0.0 <= c < 1.0 for c in self.chi):
            raise InstanceError("chi-range", "chi entries must lie in [0, 1)")
        if self.tol <= 0 or self.verify_tol <= 0:
            raise InstanceError("config", "tolerances must be positive")


# -- instance ----------------------------------------------------------------------------


def make_instance(cfg: ExperimentConfig) -> MarketInstance:
    if cfg.instance is not None:
        inst = load_instance(cfg.instance)
        if cfg.chi is not None:
            if len(cfg.chi) != inst.n_nodes:
                raise InstanceError("chi-length", f"--chi has {len(cfg.chi)} entries for {inst.n_nodes} nodes")
            inst = inst.with_chi(cfg.chi)
    elif cfg.generator == "threenode":
        inst = generate_threenode(chi=cfg.chi or (0.0, 0.0, 0.0), variant=cfg.variant, seed=cfg.seed)
    else:
        inst = generate_bus14(pricing=cfg.pricing, seed=cfg.seed, n_scenarios=cfg.n_scenarios, chi=cfg.chi)
    rule = cfg.gamma_rule
    if rule is None and cfg.mode.startswith("contracts") and inst.gamma is None:
        rule = "max-chi"
        log.info("gamma defaulted to p / (1 - max chi)")
    if rule is not None:
        inst = inst.with_gamma(gamma_from_rule(rule, inst.probs, inst.chi))
    return inst


# -- solve -------------------------------------------------------------------------------


def solve_mode(inst: MarketInstance, cfg: ExperimentConfig):
    """Run one solve; returns ``(report, book, labels)`` with ``book``/``labels`` None outside contracts."""
    from .averse import solve_centralized_averse, solve_p2p_averse
    from .contracts import solve_complete_centralized, solve_complete_p2p_gaussseidel
    from .neutral import solve_centralized_neutral, solve_p2p_neutral

    mode, tol = cfg.mode, cfg.tol
    if mode == "centralized-neutral":
        return solve_centralized_neutral(inst, tol=tol), None, None
    if mode == "p2p-neutral":
        return solve_p2p_neutral(inst, tol=tol), None, None
    if mode == "centralized-averse":
        return solve_centralized_averse(inst, tol=tol), None, None
    if mode == "p2p-averse":
        return solve_p2p_averse(inst, mode=cfg.p2p_method, tol=tol), None, None
    if mode == "contracts-centralized":
        return solve_complete_centralized(inst, tol=tol)
    rep, book, _ = solve_complete_p2p_gaussseidel(inst)
    from .contracts import classify_all

    return rep, book, classify_all(inst, rep, book)


def residuals_from_tables(inst: MarketInstance, mode: str, alloc, duals, alpha=None) -> Residuals:
    """KKT residuals of ``mode``'s program at a reported allocation and its duals.

    Peer-to-peer modes are checked player by player with the reported shared
    multipliers; with quadratic trading costs only that check is meaningful.
    """
    risk = "neutral" if mode.endswith("neutral") else "averse"
    contracts = mode.startswith("contracts")
    p2p = mode in ("p2p-neutral", "contracts-gauss-seidel") or (mode == "p2p-averse" and duals.zeta and any(
        np.any(v != 0) for v in duals.zeta.values()))
    mp = build(inst, risk=risk, design="p2p" if p2p else "centralized", contracts=contracts, alpha=alpha)
    x = mp.x_from_allocation(alloc)
    y, z, zq = mp.dual_vectors(duals)
    if p2p and has_trading_curvature(inst):
        return Residuals(*np.max(np.array(player_residuals(mp.game, x, y, z, zq)), axis=0))
    return kkt_residuals(mp.program, x, y, z, zq)


# -- output ------------------------------------------------------------------------------


def write_prices(rep: EquilibriumReport, path: Path) -> None:
    from .neutral import extract_nodal_prices_centralized, extract_nodal_prices_p2p

    p2p = rep.mode in ("p2p-neutral", "p2p-averse", "contracts-gauss-seidel")
    table = (extract_nodal_prices_p2p if p2p else extract_nodal_prices_centralized)(rep)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scenario", "node", "lambda", "lambda0", "xi_in", "xi_out", "preference", "asymmetry",
                     "reconstructed"])
        rec = table.reconstructed
        for w, sid in enumerate(rep.instance.scenarios.ids):
            for k, n in enumerate(table.node_ids):
                vals = [table.lam[k, w], table.lam0[w], table.xi_in[k, w], table.xi_out[k, w],
                        table.preference[k, w], table.asymmetry[k, w], rec[k, w]]
                wr.writerow([sid, n, *(repr(float(v)) for v in vals)])


def write_kkt(rep: EquilibriumReport, recheck: Residuals | None, feas_max: float, path: Path) -> None:
    lines = [f"mode {rep.mode}", f"status {rep.status}", f"label {rep.label}", f"iterations {rep.iterations}"]
    lines += [f"{k} {float(v)!r}" for k, v in rep.residuals._asdict().items()]
    if recheck is not None:
        lines += [f"recheck_{k} {float(v)!r}" for k, v in recheck._asdict().items()]
    lines.append(f"feasibility_report_max_violation {float(feas_max)!r}")
    for key in ("player_kkt_max", "zeta_alignment", "epigraph_vs_cvar_gap", "alpha_recovery_residual",
                "balance_residual", "sigma_residual"):
        if key in rep.extras:
            lines.append(f"{key} {float(rep.extras[key])!r}")
    if "tau_spread" in rep.extras:
        lines.append(f"tau_spread_max {float(np.max(rep.extras['tau_spread']))!r}")
    path.write_text("\n".join(lines) + "\n")


def failure_record(out: Path, code: int, kind: str, message: str, **detail) -> int:
    rec = {"exit_code": code, "kind": kind, "message": message, **detail}
    text = json.dumps(rec, indent=2, default=str)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "failure.json").write_text(text)
    except OSError:
        pass
    print(text, file=sys.stderr)
    return code


def run(cfg: ExperimentConfig) -> int:
    """Solve, write the artifact files and verify; returns the exit code."""
    try:
        cfg.validate()
        inst = make_instance(cfg)
    except (InstanceError, ValueError, OSError, json.JSONDecodeError) as exc:
        constraint = getattr(exc, "constraint", type(exc).__name__)
        return failure_record(cfg.out, EXIT_VALIDATION, "validation", str(exc), constraint=constraint)

    try:
        rep, book, labels = solve_mode(inst, cfg)
    except NonconvexModelError as exc:
        return failure_record(cfg.out, EXIT_VALIDATION, "validation", str(exc), constraint="convexity")
    except SolveError as exc:
        family = exc.family
        if family is None and exc.status == "infeasible":
            from .neutral import diagnose_infeasibility

            family = "; ".join(sorted({diagnose_infeasibility(inst, w) for w in range(inst.n_scenarios)}))
        return failure_record(cfg.out, EXIT_SOLVER, "solver", str(exc), status=exc.status, certificate=family)

    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    rep.write_json(out / "report.json")
    rep.write_allocation_csv(out / "allocation.csv")
    write_prices(rep, out / "prices.csv")
    if book is not None:
        book.write_csv(out / "contracts.csv", labels)

    recheck, failures = None, []
    feas = validate_feasible(inst, rep.allocation, tol=cfg.verify_tol)
    if cfg.verify:
        alloc, duals, alpha = read_allocation_csv(out / "allocation.csv", inst)
        recheck = residuals_from_tables(inst, rep.mode, alloc, duals, alpha)
        worst = max(rep.residuals)
        if worst > cfg.verify_tol:
            failures.append(f"KKT residual {worst:.3e} above {cfg.verify_tol:g}")
        if max(recheck) > cfg.verify_tol:
            failures.append(f"KKT residual recomputed from allocation.csv {max(recheck):.3e} above {cfg.verify_tol:g}")
        if not feas.feasible:
            failures.append(f"feasibility violation {feas.max_violation:.3e}")
        if book is not None and book.balance_residual > 1e-8:
            failures.append(f"contract balance residual {book.balance_residual:.3e}")
    write_kkt(rep, recheck, feas.max_violation, out / "kkt.txt")

    if not rep.optimal:
        return failure_record(out, EXIT_SOLVER, "solver", f"solve ended with status {rep.status}", status=rep.status)
    if failures:
        return failure_record(out, EXIT_VERIFY, "verification", "; ".join(failures), failures=failures)
    log.info("%s: objective %.10g, residuals %s", rep.mode, rep.objective, tuple(rep.residuals))
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------------


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(",", " ").split()]


def _add_instance_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--instance", type=Path, help="JSON instance file")
    src.add_argument("--generator", choices=("threenode", "bus14"), help="built-in instance generator")
    p.add_argument("--seed", type=int, help="RNG seed (required with --generator)")
    p.add_argument("--chi", type=_floats, help="risk levels, comma or space separated, one per node")
    p.add_argument("--gamma-rule", help="exogenous contract prices: max-chi or fixed:<v>")
    p.add_argument("--variant", default="conventional", choices=("conventional", "res-only"),
                   help="threenode generator variant")
    p.add_argument("--pricing", default="uniform", choices=("uniform", "heterogeneous"),
                   help="bus14 preference prices")
    p.add_argument("--n-scenarios", type=int, default=5, help="bus14 scenario count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="p2prisk", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="solve one instance and write report.json, allocation.csv, prices.csv, "
                                   "contracts.csv and kkt.txt")
    _add_instance_args(p)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--p2p-method", default="social-equivalence", choices=("social-equivalence", "gauss-seidel"),
                   help="solver used by --mode p2p-averse")
    p.add_argument("--tol", type=float, default=1e-9, help="interior-point tolerance")
    p.add_argument("--verify-tol", type=float, default=1e-6, help="largest accepted KKT residual")
    p.add_argument("--no-verify", action="store_true", help="skip the residual and round-trip checks")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    s = sub.add_parser("sweep", help="contract volume along a mean-preserving chi schedule")
    _add_instance_args(s)
    s.add_argument("--mean", type=float, default=0.4, help="mean of the chi schedule")
    s.add_argument("--steps", type=int, default=8)
    s.add_argument("--max-spread", type=float, default=None)
    s.add_argument("--tol", type=float, default=1e-9)
    s.add_argument("--out", type=Path, required=True, help="CSV path")

    g = sub.add_parser("generate", help="write a generated instance to JSON")
    _add_instance_args(g)
    g.add_argument("--out", type=Path, required=True, help="JSON path")
    return parser


def _config(args, mode: str) -> ExperimentConfig:
    return ExperimentConfig(
        mode=mode, out=args.out, instance=args.instance, generator=args.generator, seed=args.seed,
        chi=args.chi, gamma_rule=args.gamma_rule, tol=getattr(args, "tol", 1e-9),
        verify_tol=getattr(args, "verify_tol", 1e-6), variant=args.variant, pricing=args.pricing,
        n_scenarios=args.n_scenarios, p2p_method=getattr(args, "p2p_method", "social-equivalence"),
        verify=not getattr(args, "no_verify", False),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return run(_config(args, args.mode))

    cfg = _config(args, "contracts-centralized" if args.command == "sweep" else "centralized-neutral")
    try:
        cfg.validate()
        inst = make_instance(cfg)
    except (InstanceError, ValueError, OSError, json.JSONDecodeError) as exc:
        return failure_record(args.out.parent, EXIT_VALIDATION, "validation", str(exc))
    if args.command == "generate":
        save_instance(inst, args.out)
        return EXIT_OK
    schedule = mean_preserving_schedule(inst.n_nodes, args.mean, args.steps, seed=args.seed or 0,
                                        max_spread=args.max_spread)
    result = sweep_heterogeneity(inst, schedule, gamma_rule=args.gamma_rule or "max-chi", tol=args.tol)
    result.write_csv(args.out)
    return EXIT_OK if all(r.error is None for r in result.rows) else EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
