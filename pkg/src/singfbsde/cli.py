"""Command-line entry point and experiment orchestration.

Subcommands: run (full pipeline), audit, bsde, ipde, compare, oracle, report.
Exit codes: 0 all hard checks pass, 1 verification failure, 2 configuration
error, 3 numerical failure (CFL, regression rank, quadrature, simulation).

Worker threads only parallelize path-block simulation, whose output is
bit-identical per seed by construction, so --threads never changes numbers.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import bsde as bsde_mod
from . import ipde as ipde_mod
from . import model as model_mod
from . import reporting, verify
from .config import ConfigError, RunConfig, build_spec, load_config, load_config_source
from .forward import (QuadratureError, SimulationError, bundle_summary_rows,
                      moment_check, save_bundle, simulate_paths, TimeGrid)

NUMERICAL_ERRORS = (ipde_mod.CflError, ipde_mod.StencilError, ipde_mod.SchemeError,
                    bsde_mod.RegressionError, QuadratureError, SimulationError)


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="singfbsde",
        description="numerical laboratory for jump-diffusion terminal-value "
                    "problems with singular data")
    sub = parser.add_subparsers(dest="command")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="config file path or preset:NAME")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="singfbsde-out")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE")
    common.add_argument("--threads", type=int, default=None)

    stage_of = {"run": None, "audit": ("audit",), "bsde": ("bsde",),
                "ipde": ("ipde",), "compare": ("bsde", "ipde", "verify")}
    for name, stages in stage_of.items():
        p = sub.add_parser(name, parents=[common])
        p.set_defaults(handler=lambda a, st=stages: _cmd_pipeline(a, st))

    p = sub.add_parser("oracle", parents=[common],
                       help="print the comparison-solution value")
    p.set_defaults(handler=_cmd_oracle)
    p = sub.add_parser("report", parents=[common],
                       help="re-render plots from stored CSVs")
    p.set_defaults(handler=_cmd_report)
    return parser


def _cmd_oracle(args) -> int:
    params = {"q": 2.0, "a0": 1.0, "f0c": 0.0, "n": 10.0, "T": 1.0, "t": 0.0}
    for ov in args.overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        key, val = ov.split("=", 1)
        key = key.strip()
        if key not in params:
            raise ConfigError(f"unknown oracle parameter {key!r}; have {sorted(params)}")
        params[key] = math.inf if val.strip() == "inf" else float(val)
    val = verify.ode_oracle(params["q"], params["a0"], params["f0c"],
                            params["n"], params["T"], params["t"])
    print(f"{val:.6f}")
    return 0


def _cmd_report(args) -> int:
    out = Path(args.out)
    sol_csv = out / "ipde_solution.csv"
    levels_csv = out / "bsde_levels.csv"
    if not sol_csv.exists() and not levels_csv.exists():
        print(f"config error: no solver CSVs found in {out}", file=sys.stderr)
        return 2
    if sol_csv.exists():
        sol = reporting.read_solution_csv(sol_csv)
        reporting.plot_profiles(out / "profiles.svg", sol)
        j = sol.u.shape[1] // 2
        s = sol.t_nodes[-1] - sol.t_nodes[:-1]
        reporting.plot_blowup(out / "blowup.svg", s[::-1], sol.u[:-1, j][::-1],
                              None, float(sol.grid.nodes[j]))
    if levels_csv.exists():
        import csv as _csv
        with open(levels_csv, newline="", encoding="utf-8") as fh:
            rows = list(_csv.DictReader(fh))
        if rows:
            reporting.plot_ladder(out / "ladder.svg",
                                  [int(r["n"]) for r in rows],
                                  [float(r["u_root"]) for r in rows])
    print(f"plots rendered into {out}")
    return 0


def _cmd_pipeline(args, stages) -> int:
    if args.config is None:
        raise ConfigError("--config is required (path or preset:NAME)")
    source = load_config_source(args.config)
    cfg = load_config(source, args.overrides)
    seed = args.seed if args.seed is not None else cfg.get("run", "seed")
    threads = args.threads
    if threads is None:
        env = os.environ.get("SINGFBSDE_THREADS")
        threads = int(env) if env else (cfg.get("run", "threads") or 1)
    if stages is None:
        stages = tuple(s.strip() for s in cfg.get("run", "stages").split(",") if s.strip())
    out = Path(args.out)
    code, _ = run_experiment(cfg, out, seed=seed, threads=threads, stages=stages)
    return code


def run_experiment(cfg: RunConfig, out_dir: Path, *, seed: int, threads: int = 1,
                   stages=("audit", "bsde", "ipde", "verify")) -> tuple[int, dict]:
    """Execute the configured pipeline and write every artifact under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    spec = build_spec(cfg)
    v = cfg.values
    t0, x0 = v["run"]["t"], v["run"]["x"]
    T = spec.horizon
    timings: dict[str, float] = {}
    artifacts: list[Path] = []
    hard_failures: list[str] = []
    report = verify.VerificationReport()
    audit_report = None
    limit = None
    ipde_levels = None
    ipde_sol = None

    if "audit" in stages:
        tic = time.perf_counter()
        audit_report = model_mod.audit_assumptions(spec)
        timings["audit"] = time.perf_counter() - tic
        rows = [{"condition": c.condition,
                 "verdict": {True: "pass", False: "FAIL", None: "vacuous"}[c.passed],
                 "margin": c.margin, "probes": c.probes,
                 "witness": repr(c.witness), "note": c.note}
                for c in audit_report.checks]
        artifacts.append(reporting.write_dict_csv(out_dir / "audit.csv", rows))
        if v["verify"]["audit_hard"] and not audit_report.passed:
            bad = ", ".join(f"{c.condition} (witness {c.witness})"
                            for c in audit_report.failures())
            print(f"audit failures: {bad}", file=sys.stderr)
            hard_failures.append("audit")

    if "forward" in stages:
        tic = time.perf_counter()
        grid = TimeGrid(t0, T, v["forward"]["n_steps"])
        bundle = simulate_paths(spec.model, t0, x0, grid, v["forward"]["n_paths"],
                                seed, gamma=spec.gen.gamma,
                                small_jump_mode=v["forward"]["small_jump_mode"],
                                delta_cut=v["forward"]["delta_cut"], threads=threads)
        timings["forward"] = time.perf_counter() - tic
        artifacts.append(reporting.write_dict_csv(out_dir / "forward_summary.csv",
                                                  bundle_summary_rows(bundle)))
        mc2 = moment_check(bundle, 2.0, x0)
        report.add(verify.CheckResult("moment_bound_p2", None, mc2.statistic,
                                      mc2.bound, 3 * mc2.se,
                                      note="calibrated moment bound, reported"))
        if v["forward"]["save_bundle"]:
            save_bundle(bundle, out_dir / "paths.bin")
            artifacts.append(out_dir / "paths.bin")

    if "bsde" in stages:
        tic = time.perf_counter()
        basis = bsde_mod.RegressionBasis(kind=v["bsde"]["basis"],
                                         degree=v["bsde"]["degree"],
                                         n_bins=v["bsde"]["n_bins"],
                                         ridge=v["bsde"]["ridge"])
        mc = bsde_mod.McConfig(n_paths=v["forward"]["n_paths"],
                               n_steps=v["forward"]["n_steps"], seed=seed,
                               basis=basis, delta_cut=v["forward"]["delta_cut"],
                               small_jump_mode=v["forward"]["small_jump_mode"],
                               threads=threads, y_update=v["bsde"]["y_update"],
                               dt_max=v["bsde"]["dt_max"])
        limit = bsde_mod.monotone_limit(spec, t0, x0, v["bsde"]["schedule"],
                                        v["bsde"]["tol"], mc, keep_solutions=True)
        timings["bsde"] = time.perf_counter() - tic
        rc = model_mod.check_rho_condition(spec.gen.decay_power, spec.gen.ell)
        rho = rc.rho if rc.passed else 0.5
        theta_l2 = spec.theta_norms()[0]
        rows = []
        for k, sol in enumerate(limit.per_level):
            rows.append({"n": limit.levels[k], "u_root": limit.u_values[k],
                         "gap": (limit.u_values[k] - limit.u_values[k - 1]) if k else math.nan,
                         "se": limit.se_values[k],
                         "clamp_fraction": sol.diagnostics["clamp_fraction"],
                         "zu_norm": bsde_mod.zu_weighted_norm(sol, rho, theta_l2=theta_l2)})
        artifacts.append(reporting.write_dict_csv(out_dir / "bsde_levels.csv", rows))
        report.add(verify.CheckResult(
            "bsde_monotone_levels", limit.monotone_ok,
            min((b - a) for a, b in zip(limit.u_values, limit.u_values[1:]))
            if len(limit.u_values) > 1 else math.nan,
            0.0, 0.0, note="root values non-decreasing within 3 pooled s.e."))
        report.add(verify.CheckResult(
            "bsde_converged", limit.converged if len(limit.levels) > 1 else None,
            limit.gap, 0.0, v["bsde"]["tol"],
            note="last level gap below tolerance (heuristic declaration)"))

    if "ipde" in stages:
        tic = time.perf_counter()
        grid = ipde_mod.SpaceGrid(v["ipde"]["x_min"], v["ipde"]["x_max"], v["ipde"]["nx"])
        delta = v["ipde"]["delta"] if v["ipde"]["delta"] is not None \
            else v["forward"]["delta_cut"]
        if not spec.terminal.singular_set.is_empty:
            res = ipde_mod.solve_singular_ipde(
                spec, grid, v["ipde"]["nt"], v["ipde"]["schedule"], v["ipde"]["tol"],
                t0=t0, eps_window=v["ipde"]["eps_window"], delta_cut=delta,
                small_jump_mode=v["forward"]["small_jump_mode"],
                cfl_max=v["ipde"]["cfl_max"], y_update=v["ipde"]["y_update"],
                dt_max=v["ipde"]["dt_max"],
                extrap_mass_cap=v["ipde"]["extrap_mass_cap"])
            ipde_sol, ipde_levels = res.solution, res.per_level
            report.add(verify.CheckResult(
                "ipde_converged", res.converged,
                res.gaps[-1] if res.gaps else math.nan, 0.0, v["ipde"]["tol"],
                note=f"sup-norm level gap on t <= T - {v['ipde']['eps_window']}"))
        else:
            n_top = v["ipde"]["schedule"][-1]
            ipde_sol = ipde_mod.solve_truncated_ipde(
                spec, n_top, grid, v["ipde"]["nt"], t0=t0, delta_cut=delta,
                small_jump_mode=v["forward"]["small_jump_mode"],
                cfl_max=v["ipde"]["cfl_max"], y_update=v["ipde"]["y_update"],
                extrap_mass_cap=v["ipde"]["extrap_mass_cap"])
            ipde_levels = [ipde_sol]
        timings["ipde"] = time.perf_counter() - tic
        artifacts.append(reporting.write_solution_csv(out_dir / "ipde_solution.csv",
                                                      ipde_sol))
        report.add(verify.CheckResult(
            "ipde_bound_violations", ipde_sol.stability["bound_violations"] == 0,
            ipde_sol.stability["bound_violations"], 0.0, 0.0,
            witness={"u_max": ipde_sol.stability["u_max"],
                     "level_bound": ipde_sol.stability["level_bound"]},
            note="level bound asserted, not enforced"))

    if "verify" in stages and ipde_levels is not None:
        tic = time.perf_counter()
        suite = verify.solution_invariant_suite(
            ipde_levels, spec, t0, x0, audit=audit_report,
            eps_sweep=v["verify"]["eps_sweep"],
            x_regular=v["verify"]["x_regular"],
            x_singular=v["verify"]["x_singular"],
            divergence_threshold=v["verify"]["divergence_threshold"],
            k_cal=v["verify"]["k_cal"])
        for c in suite.checks:
            report.add(c)
        if limit is not None:
            policy = verify.TolPolicy(mode=v["verify"]["mode"],
                                      rel_tol=v["verify"]["rel_tol"],
                                      abs_tol=v["verify"]["abs_tol"],
                                      grid_error=v["verify"]["grid_error"])
            points = [(t0, x0)] + [p for p in v["verify"]["points"] if p != (t0, x0)]
            sols = [limit]
            basis = bsde_mod.RegressionBasis(kind=v["bsde"]["basis"],
                                             degree=v["bsde"]["degree"],
                                             n_bins=v["bsde"]["n_bins"],
                                             ridge=v["bsde"]["ridge"])
            for (tp, xp) in points[1:]:
                mc = bsde_mod.McConfig(n_paths=v["forward"]["n_paths"],
                                       n_steps=v["forward"]["n_steps"], seed=seed,
                                       basis=basis,
                                       delta_cut=v["forward"]["delta_cut"],
                                       small_jump_mode=v["forward"]["small_jump_mode"],
                                       threads=threads,
                                       y_update=v["bsde"]["y_update"],
                                       dt_max=v["bsde"]["dt_max"])
                sols.append(bsde_mod.monotone_limit(spec, tp, xp,
                                                    v["bsde"]["schedule"],
                                                    v["bsde"]["tol"], mc))
            cross = verify.cross_validate(sols, ipde_sol, points, policy)
            for c in cross.checks:
                report.add(c)
        if ipde_sol is not None:
            est = verify.modulus_estimate(ipde_sol, v["ipde"]["eps_window"])
            report.add(verify.CheckResult(
                "modulus_of_continuity", None, est.lipschitz_est, math.nan, 0.0,
                witness={"holder_alpha_grid": est.holder_alpha_grid,
                         "separations": est.separations},
                note="empirical diagnostic away from the terminal time; never asserted"))
        if v["verify"]["blowup_x"] is not None and ipde_sol is not None:
            xq = v["verify"]["blowup_x"]
            s = (T - ipde_sol.t_nodes[:-1])[::-1]
            u = np.asarray([ipde_sol.value(T - sv, xq) for sv in s])
            try:
                fit = verify.blowup_rate_fit(list(zip(s, u)),
                                             tuple(v["verify"]["blowup_window"]))
                expected = -1.0 / spec.gen.decay_power
                report.add(verify.CheckResult(
                    "blowup_slope", abs(fit.slope - expected) <= v["verify"]["blowup_q_tol"],
                    fit.slope, expected, v["verify"]["blowup_q_tol"],
                    witness={"r2": fit.r2}, note=f"log-log fit at x={xq:g}"))
            except ValueError as exc:
                report.add(verify.CheckResult("blowup_slope", False, math.nan,
                                              -1.0 / spec.gen.decay_power,
                                              v["verify"]["blowup_q_tol"],
                                              note=f"fit rejected: {exc}"))
        timings["verify"] = time.perf_counter() - tic

    if report.checks and v["output"]["csv"]:
        artifacts.append(reporting.write_dict_csv(out_dir / "verification.csv",
                                                  report.rows()))
    if v["output"]["plots"]:
        tic = time.perf_counter()
        if ipde_sol is not None:
            artifacts.append(reporting.plot_profiles(out_dir / "profiles.svg", ipde_sol))
        if limit is not None:
            u_fd = None
            if ipde_levels is not None and len(ipde_levels) == len(limit.levels):
                u_fd = [s.value(t0, x0) for s in ipde_levels]
            artifacts.append(reporting.plot_ladder(out_dir / "ladder.svg",
                                                   limit.levels, limit.u_values, u_fd))
        if v["verify"]["blowup_x"] is not None and ipde_sol is not None:
            xq = v["verify"]["blowup_x"]
            s = (T - ipde_sol.t_nodes[:-1])[::-1]
            u = [ipde_sol.value(T - sv, xq) for sv in s]
            slope = None
            try:
                slope = report["blowup_slope"].measured
            except KeyError:
                pass
            artifacts.append(reporting.plot_blowup(out_dir / "blowup.svg",
                                                   s, u, slope, xq))
        timings["plots"] = time.perf_counter() - tic

    if not report.passed:
        hard_failures.append("verification")
    code = 1 if hard_failures else 0
    summary = {"n_checks": len(report.checks),
               "n_failures": len(report.failures()),
               "failures": [c.name for c in report.failures()],
               "hard_failures": hard_failures}
    reporting.write_manifest(out_dir / "manifest.json", config_ini=cfg.to_ini(),
                             seed=seed, threads=threads, timings=timings,
                             artifacts=artifacts, verification=summary,
                             exit_code=code)
    if report.checks:
        print(report.render_text())
    print(f"artifacts in {out_dir} (exit {code})")
    return code, summary


if __name__ == "__main__":
    sys.exit(main())
