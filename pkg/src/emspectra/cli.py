"""Command-line entry point: ``emspectra {bench,run,spectral,energy,curve}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import replace

import numpy as np

from .accelerators import Method, MethodConfig, locate_fixed_point, run_method
from .bench import (
    RATE_CURVE_HEADER,
    _json_safe,
    builtin_scenarios,
    emit_rate_curve,
    emit_report,
    load_config,
    rate_curve_rows,
    report_csv,
    report_json,
    run_benchmark,
    scenario_by_name,
)
from .diagnostics import energy_decompose
from .gmm import GmmProblem, generate_dataset
from .spectral import (
    contraction_radius_estimate,
    fisher_triple,
    jacobian_fd,
    louis_mis,
    relaxation_analysis,
    triple_equivalence_residual,
)


def _add_common(p: argparse.ArgumentParser, multi: bool) -> None:
    p.add_argument("--config", help="JSON file with 'scenarios' and/or 'methods' lists")
    if multi:
        p.add_argument("--scenario", action="append",
                       help="scenario name (repeatable; default: all in the catalog)")
    else:
        p.add_argument("--scenario", default="Extreme", help="scenario name (default: Extreme)")
    p.add_argument("--seed", type=int, help="base seed (bench) or dataset seed")
    p.add_argument("--tol", type=float, help="step-norm tolerance")
    p.add_argument("--max-iter", type=int, help="iteration cap")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out", help="output path (default: stdout)")


def _add_method(p: argparse.ArgumentParser, multi: bool) -> None:
    choices = [m.value for m in Method]
    if multi:
        p.add_argument("--method", action="append", choices=choices,
                       help="method (repeatable; default: all four)")
    else:
        p.add_argument("--method", choices=choices, default=Method.GEO_ADAPTIVE.value)
    p.add_argument("--gamma", type=float, help="fixed gamma for DCC_FIXED")
    p.add_argument("--lambda-floor", type=float, help="lower clip for lambda estimates")
    p.add_argument("--gamma-max", type=float, help="upper bound on adaptive gamma")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emspectra", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bench", help="multi-trial benchmark over scenarios and methods")
    _add_common(p, multi=True)
    _add_method(p, multi=True)
    p.add_argument("--trials", type=int, help="trials per scenario")
    p.add_argument("--parallel", action="store_true", help="run trials in worker processes")
    p.add_argument("--trace", action="store_true", help="include per-step diagnostics (JSON only)")

    p = sub.add_parser("run", help="one scenario and method with per-step diagnostics")
    _add_common(p, multi=False)
    _add_method(p, multi=False)

    p = sub.add_parser("spectral", help="fixed-point analysis for one scenario dataset")
    _add_common(p, multi=False)

    p = sub.add_parser("energy", help="per-step energy decomposition of a plain-EM run")
    _add_common(p, multi=False)

    p = sub.add_parser("curve", help="contraction-factor curve over a lambda grid")
    p.add_argument("--lambdas", help="comma-separated grid in (0, 1] (default: 50 log-spaced points)")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--format", choices=["csv"], default="csv")
    return parser


def _scenarios(args, multi: bool):
    catalog, methods = (load_config(args.config) if args.config else (builtin_scenarios(), None))
    names = (args.scenario or []) if multi else [args.scenario]
    chosen = [scenario_by_name(n, catalog) for n in names] if names else catalog
    over = {}
    if args.seed is not None:
        over["base_seed"] = args.seed
    if args.tol is not None:
        over["tol"] = args.tol
    if args.max_iter is not None:
        over["max_iter"] = args.max_iter
    if getattr(args, "trials", None) is not None:
        over["n_trials"] = args.trials
    return [replace(s, **over) for s in chosen], methods


def _method_overrides(args) -> dict:
    over = {}
    if args.gamma is not None:
        over["gamma_fixed"] = args.gamma
    if args.lambda_floor is not None:
        over["lambda_floor"] = args.lambda_floor
    if args.gamma_max is not None:
        over["gamma_max"] = args.gamma_max
    return over


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _table(header, rows, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(_json_safe([dict(zip(header, r)) for r in rows]), indent=2) + "\n"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else v for v in r])
    return buf.getvalue()


def _problem(scenario):
    return GmmProblem(generate_dataset(scenario.true_params, scenario.n_samples, scenario.base_seed))


def cmd_bench(args) -> int:
    scenarios, cfg_methods = _scenarios(args, multi=True)
    over = _method_overrides(args)
    if args.method:
        methods = [MethodConfig(method=m, **over) for m in args.method]
    elif cfg_methods:
        methods = [replace(m, **over) for m in cfg_methods]
    else:
        methods = [MethodConfig(method=m, **over) for m in Method]
    report = run_benchmark(scenarios, methods, parallel=args.parallel, record_steps=args.trace)
    if args.out:
        emit_report(report, args.format, args.out, include_trace=args.trace)
    else:
        _emit(report_csv(report) if args.format == "csv" else report_json(report, args.trace) + "\n", None)
    return 0 if all(r.error is None for r in report.rows) else 1


def cmd_run(args) -> int:
    (scenario,), _ = _scenarios(args, multi=False)
    cfg = MethodConfig(method=args.method, **_method_overrides(args))
    problem = _problem(scenario)
    res = run_method(problem, np.array(scenario.theta0), scenario.stop, cfg)
    header = ["k", "loglik", "step_norm", "fallback", "lambda_hat", "gamma", "beta", "lambda_est"]
    rows = [[0, res.loglik[0], None, None, None, None, None, None]]
    for k, (ll, s, e) in enumerate(zip(res.loglik[1:], res.step_norms, res.extras), start=1):
        rows.append([k, ll, s, e.get("fallback"), e.get("lambda_hat"), e.get("gamma"), e.get("beta"),
                     e.get("lambda_est")])
    _emit(_table(header, rows, args.format), args.out)
    status = "converged" if res.converged else "hit max_iter"
    print(f"{scenario.name} seed={scenario.base_seed} {cfg.label}: {res.iterations_used} iterations, "
          f"{status}, final loglik {res.final_loglik:.10g}", file=sys.stderr)
    return 0


def cmd_spectral(args) -> int:
    (scenario,), _ = _scenarios(args, multi=False)
    problem = _problem(scenario)
    theta = locate_fixed_point(problem, np.array(scenario.theta0))
    triple = fisher_triple(problem, theta)
    dt = jacobian_fd(problem, theta)
    an = relaxation_analysis(dt, triple)
    rho0 = contraction_radius_estimate(problem, theta, an)
    mis = louis_mis(problem, theta)
    doc = {
        "scenario": scenario.name,
        "seed": scenario.base_seed,
        "theta_star": theta.tolist(),
        "fisher": triple.to_dict(),
        "eigenvalues": an.eigenvalues.tolist(),
        "lambda_min": an.lambda_min,
        "rho_em": an.rho_em,
        "beta_star": an.beta_star,
        "rho_acc": an.rho_acc,
        "rho0": rho0,
        "triple_equivalence_residual": triple_equivalence_residual(dt, triple),
        "louis_residual": float(np.linalg.norm(mis - triple.i_mis) / np.linalg.norm(triple.i_com)),
    }
    if args.format == "json":
        _emit(json.dumps(doc, indent=2) + "\n", args.out)
    else:
        keys = ["lambda_min", "rho_em", "beta_star", "rho_acc", "rho0", "triple_equivalence_residual",
                "louis_residual"]
        rows = [[k, doc[k]] for k in keys]
        rows += [[f"eigenvalue_{i}", v] for i, v in enumerate(doc["eigenvalues"])]
        rows += [[f"theta_star_{i}", v] for i, v in enumerate(doc["theta_star"])]
        _emit(_table(["quantity", "value"], rows, "csv"), args.out)
    return 0


def cmd_energy(args) -> int:
    (scenario,), _ = _scenarios(args, multi=False)
    problem = _problem(scenario)
    res = run_method(problem, np.array(scenario.theta0), scenario.stop, MethodConfig())
    header = ["k", "ell_gain", "delta_q", "kl_transport", "residual"]
    rows = []
    for k, (a, b) in enumerate(zip(res.iterates[:-1], res.iterates[1:])):
        e = energy_decompose(problem, a, b)
        rows.append([k, e.ell_gain, e.delta_q, e.kl_transport, e.residual])
    _emit(_table(header, rows, args.format), args.out)
    return 0


def cmd_curve(args) -> int:
    if args.lambdas:
        grid = [float(v) for v in args.lambdas.split(",") if v.strip()]
    else:
        grid = np.logspace(-4, 0, 50).tolist()
    if args.out:
        emit_rate_curve(grid, args.out)
    else:
        _emit(_table(RATE_CURVE_HEADER, [[repr(v) for v in r] for r in rate_curve_rows(grid)], "csv"), None)
    return 0


COMMANDS = {"bench": cmd_bench, "run": cmd_run, "spectral": cmd_spectral, "energy": cmd_energy,
            "curve": cmd_curve}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, KeyError, OSError, ArithmeticError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"emspectra {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
