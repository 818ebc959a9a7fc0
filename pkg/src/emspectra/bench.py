"""Scenario catalog, seeded multi-trial benchmark and report writers.

Report schema
-------------
CSV: one line per trial under the header ``CSV_HEADER``.  If there is at
least one trial, a blank line and an aggregate block (header
``AGG_HEADER``) follow, then another blank line and the per-method
geometric-mean speedups (header ``method,geomean_speedup``).  Missing
values (``mean_gamma`` for momentum-free methods, anything from a failed
trial) are empty cells.

JSON: ``{"rows": [...], "aggregates": [...], "speedup_summary": {...}}``
with the field names of :class:`TrialRow` and :class:`Aggregate`.  Rows
carry ``error`` (``null`` unless the trial raised) and, when requested,
``trace`` with the per-step log-likelihoods, step norms, diagnostics and
iterates.  Missing values are ``null``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .accelerators import Method, MethodConfig, run_method
from .em_core import StopRule
from .gmm import GmmParams, GmmProblem, generate_dataset

CSV_HEADER = ["scenario", "method", "trial", "seed", "iterations", "time_s", "final_ll", "converged",
              "fallbacks", "mean_gamma"]
AGG_HEADER = ["scenario", "method", "n", "n_failed", "mean_iterations", "std_iterations", "mean_time_s",
              "std_time_s", "speedup", "mean_final_ll"]
DEFAULT_THETA0 = (0.5, -0.5, 1.5, 0.5, 1.5)


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    true_params: GmmParams
    n_samples: int
    theta0: tuple = DEFAULT_THETA0
    tol: float = 1e-8
    max_iter: int = 2000
    n_trials: int = 10
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta0", tuple(float(v) for v in self.theta0))
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if self.n_samples < 2:
            raise ValueError("n_samples must be at least 2")
        StopRule(self.tol, self.max_iter)

    def __eq__(self, other):
        if not isinstance(other, ScenarioConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    @property
    def stop(self) -> StopRule:
        return StopRule(self.tol, self.max_iter)

    def seed(self, trial: int) -> int:
        return self.base_seed + trial

    def to_dict(self) -> dict:
        p = self.true_params
        return {
            "name": self.name,
            "true_params": {"weights": p.weights.tolist(), "mu": p.mu.tolist(), "sigma": p.sigma.tolist()},
            "n_samples": self.n_samples,
            "theta0": list(self.theta0),
            "tol": self.tol,
            "max_iter": self.max_iter,
            "n_trials": self.n_trials,
            "base_seed": self.base_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d["true_params"] = GmmParams(**d["true_params"])
        return cls(**d)


def builtin_scenarios() -> list[ScenarioConfig]:
    """The four benchmark scenarios.

    Extreme: nearly coincident means under a 0.1/0.9 split, N=300.  The
    other three use N=500 and span easy (UnequalVar) to very slow
    (Imbalanced) plain-EM convergence.
    """
    return [
        ScenarioConfig("Extreme", GmmParams.two(0.1, [0.0, 0.05], [1.0, 1.0]), 300),
        ScenarioConfig("ModerateOverlap", GmmParams.two(0.5, [0.0, 1.0], [1.0, 1.0]), 500),
        ScenarioConfig("UnequalVar", GmmParams.two(0.5, [0.0, 3.0], [1.0, 3.0]), 500),
        ScenarioConfig("Imbalanced", GmmParams.two(0.05, [0.0, 1.5], [1.0, 1.0]), 500),
    ]


def scenario_by_name(name: str, catalog=None) -> ScenarioConfig:
    catalog = builtin_scenarios() if catalog is None else catalog
    for s in catalog:
        if s.name.lower() == name.lower():
            return s
    raise KeyError(f"unknown scenario {name!r}; known: {', '.join(s.name for s in catalog)}")


@dataclass
class TrialRow:
    scenario: str
    method: str
    trial: int
    seed: int
    iterations: int
    time_s: float
    final_ll: float | None
    converged: bool
    fallbacks: int
    mean_gamma: float | None
    error: str | None = None
    trace: dict | None = field(default=None, compare=False)

    def csv_values(self) -> list[str]:
        return [_cell(getattr(self, k)) for k in CSV_HEADER]

    def to_dict(self, include_trace: bool = False) -> dict:
        d = asdict(self)
        if not include_trace:
            d.pop("trace")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrialRow":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class Aggregate:
    scenario: str
    method: str
    n: int
    n_failed: int
    mean_iterations: float | None
    std_iterations: float | None
    mean_time_s: float | None
    std_time_s: float | None
    speedup: float | None
    mean_final_ll: float | None


@dataclass
class BenchmarkReport:
    rows: list[TrialRow]
    aggregates: list[Aggregate]
    speedup_summary: dict

    def aggregate(self, scenario: str, method: str) -> Aggregate:
        for a in self.aggregates:
            if a.scenario == scenario and a.method == method:
                return a
        raise KeyError((scenario, method))

    def to_dict(self, include_trace: bool = False) -> dict:
        return {
            "rows": [r.to_dict(include_trace) for r in self.rows],
            "aggregates": [asdict(a) for a in self.aggregates],
            "speedup_summary": dict(self.speedup_summary),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkReport":
        return cls(
            [TrialRow.from_dict(r) for r in d["rows"]],
            [Aggregate(**a) for a in d["aggregates"]],
            dict(d["speedup_summary"]),
        )


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _mean_std(values):
    if not values:
        return None, None
    a = np.asarray(values, dtype=np.float64)
    std = float(a.std(ddof=1)) if a.size > 1 else 0.0
    return float(a.mean()), std


def compute_aggregates(rows: list[TrialRow]) -> tuple[list[Aggregate], dict]:
    """Per-(scenario, method) statistics and geometric-mean speedups.

    Failed trials count towards ``n_failed`` only.  ``speedup`` is the
    ratio of plain-EM mean iterations to the method's mean iterations in
    the same scenario (``None`` without an EM baseline); the summary takes
    the geometric mean of each method's speedups over scenarios.
    """
    groups: dict[tuple[str, str], list[TrialRow]] = {}
    for r in rows:
        groups.setdefault((r.scenario, r.method), []).append(r)
    aggs = []
    for (scen, meth), rs in sorted(groups.items()):
        ok = [r for r in rs if r.error is None]
        mi, si = _mean_std([r.iterations for r in ok])
        mt, st = _mean_std([r.time_s for r in ok])
        ml, _ = _mean_std([r.final_ll for r in ok])
        aggs.append(Aggregate(scen, meth, len(rs), len(rs) - len(ok), mi, si, mt, st, None, ml))
    base = {a.scenario: a.mean_iterations for a in aggs if a.method == Method.EM.value}
    for a in aggs:
        b = base.get(a.scenario)
        if b is not None and a.mean_iterations:
            a.speedup = 1.0 if a.method == Method.EM.value else b / a.mean_iterations
    summary = {}
    for meth in sorted({a.method for a in aggs}):
        sp = [a.speedup for a in aggs if a.method == meth and a.speedup is not None]
        if sp:
            summary[meth] = 1.0 if meth == Method.EM.value else float(math.exp(np.mean(np.log(sp))))
    return aggs, summary


def _run_trial(scenario: ScenarioConfig, methods: list[MethodConfig], trial: int,
               record_steps: bool) -> list[TrialRow]:
    seed = scenario.seed(trial)
    rows = []
    try:
        problem = GmmProblem(generate_dataset(scenario.true_params, scenario.n_samples, seed))
    except Exception as exc:  # noqa: BLE001 - recorded in the rows
        return [TrialRow(scenario.name, m.label, trial, seed, 0, 0.0, None, False, 0, None,
                         error=f"{type(exc).__name__}: {exc}") for m in methods]
    for cfg in methods:
        t0 = time.perf_counter()
        try:
            res = run_method(problem, np.array(scenario.theta0), scenario.stop, cfg, thin=not record_steps)
        except Exception as exc:  # noqa: BLE001 - recorded in the row
            rows.append(TrialRow(scenario.name, cfg.label, trial, seed, 0, time.perf_counter() - t0, None,
                                 False, 0, None, error=f"{type(exc).__name__}: {exc}"))
            continue
        elapsed = time.perf_counter() - t0
        gammas = [e["gamma"] for e in res.extras if e.get("gamma") is not None]
        trace = None
        if record_steps:
            trace = {
                "loglik": list(res.loglik),
                "step_norms": list(res.step_norms),
                "extras": [dict(e) for e in res.extras],
                "iterates": [t.tolist() for t in res.iterates],
            }
        rows.append(TrialRow(
            scenario.name, cfg.label, trial, seed, res.iterations_used, elapsed, float(res.final_loglik),
            bool(res.converged), res.fallback_count, float(np.mean(gammas)) if gammas else None,
            trace=trace,
        ))
    return rows


def _run_trial_args(args):
    return _run_trial(*args)


def run_benchmark(scenarios: list[ScenarioConfig], methods: list[MethodConfig], parallel: bool = False,
                  record_steps: bool = False, workers: int | None = None) -> BenchmarkReport:
    """Run every method on every trial of every scenario.

    Trial ``i`` of a scenario draws its dataset with seed ``base_seed + i``
    and all methods run on that same dataset.  With ``parallel`` the trials
    run in worker processes; rows are sorted by (scenario, method, trial)
    either way, so the report does not depend on scheduling.  A trial that
    raises is recorded with its error and the benchmark carries on.
    """
    if not scenarios or not methods:
        raise ValueError("need at least one scenario and one method")
    tasks = [(s, list(methods), t, record_steps) for s in scenarios for t in range(s.n_trials)]
    if parallel and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_trial_args, tasks))
    else:
        chunks = [_run_trial_args(t) for t in tasks]
    rows = sorted((r for c in chunks for r in c), key=lambda r: (r.scenario, r.method, r.trial))
    aggs, summary = compute_aggregates(rows)
    return BenchmarkReport(rows, aggs, summary)


def _json_safe(obj):
    # numpy scalars and non-finite floats are not valid JSON
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def report_csv(report: BenchmarkReport, include_time: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in report.rows:
        vals = r.csv_values()
        if not include_time:
            vals[CSV_HEADER.index("time_s")] = ""
        w.writerow(vals)
    if report.rows:
        w.writerow([])
        w.writerow(AGG_HEADER)
        for a in report.aggregates:
            vals = [_cell(getattr(a, k)) for k in AGG_HEADER]
            if not include_time:
                vals[AGG_HEADER.index("mean_time_s")] = vals[AGG_HEADER.index("std_time_s")] = ""
            w.writerow(vals)
        w.writerow([])
        w.writerow(["method", "geomean_speedup"])
        for m, s in report.speedup_summary.items():
            w.writerow([m, _cell(s)])
    return buf.getvalue()


def report_json(report: BenchmarkReport, include_trace: bool = False) -> str:
    return json.dumps(_json_safe(report.to_dict(include_trace)), indent=2)


def emit_report(report: BenchmarkReport, fmt: str, path, include_trace: bool = False,
                include_time: bool = True) -> None:
    """Write ``report`` as ``csv`` or ``json`` to ``path``.

    ``include_time=False`` blanks the wall-clock columns (CSV only), which
    makes reports from identical configurations byte-identical.
    """
    if fmt == "csv":
        text = report_csv(report, include_time)
    elif fmt == "json":
        text = report_json(report, include_trace)
    else:
        raise ValueError(f"unknown format {fmt!r}")
    _write(path, text)


def load_report(path) -> BenchmarkReport:
    return BenchmarkReport.from_dict(json.loads(Path(path).read_text()))


def read_csv_rows(path) -> list[TrialRow]:
    """Parse the trial block of a CSV report back into rows."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected header {header}")
        for rec in reader:
            if not rec:
                break
            v = dict(zip(CSV_HEADER, rec))
            rows.append(TrialRow(
                v["scenario"], v["method"], int(v["trial"]), int(v["seed"]), int(v["iterations"]),
                float(v["time_s"]) if v["time_s"] else 0.0,
                float(v["final_ll"]) if v["final_ll"] else None,
                v["converged"] == "true", int(v["fallbacks"]),
                float(v["mean_gamma"]) if v["mean_gamma"] else None,
                error=None if v["final_ll"] else "failed",
            ))
    return rows


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


RATE_CURVE_HEADER = ["lambda", "rho_em", "rho_acc", "step_ratio", "log_rate_ratio"]


def rate_curve_rows(lambda_grid) -> list[tuple[float, float, float, float, float]]:
    """Contraction factors of plain EM and of optimal momentum over a grid.

    Each row is ``(lam, 1 - lam, 1 - sqrt(lam), (1 - lam) / (1 - sqrt(lam)),
    log(1 - lam) / log(1 - sqrt(lam)))``.  The reciprocal of the last
    column is the iteration-count speedup of the accelerated rate.  At
    ``lam = 1`` both rates are 0 and both ratios are reported as 1.
    """
    out = []
    for lam in lambda_grid:
        lam = float(lam)
        if not 0.0 < lam <= 1.0:
            raise ValueError(f"grid values must lie in (0, 1], got {lam}")
        rho_em = 1.0 - lam
        rho_acc = 1.0 - math.sqrt(lam)
        if rho_acc == 0.0:
            ratio = log_ratio = 1.0
        else:
            ratio = rho_em / rho_acc
            log_ratio = math.log(rho_em) / math.log(rho_acc) if rho_em > 0 else 1.0
        out.append((lam, rho_em, rho_acc, ratio, log_ratio))
    return out


def emit_rate_curve(lambda_grid, path) -> list[tuple[float, float, float, float, float]]:
    rows = rate_curve_rows(lambda_grid)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RATE_CURVE_HEADER)
    for r in rows:
        w.writerow([repr(v) for v in r])
    _write(path, buf.getvalue())
    return rows


def save_config(path, scenarios: list[ScenarioConfig], methods: list[MethodConfig]) -> None:
    doc = {"scenarios": [s.to_dict() for s in scenarios], "methods": [m.to_dict() for m in methods]}
    _write(path, json.dumps(doc, indent=2))


def load_config(path) -> tuple[list[ScenarioConfig], list[MethodConfig]]:
    """Read a JSON config with ``scenarios`` and ``methods`` lists.

    Either list may be omitted; the builtin catalog and all four methods
    with default settings are used instead.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    scenarios = [ScenarioConfig.from_dict(s) for s in doc.get("scenarios", [])] or builtin_scenarios()
    methods = [MethodConfig.from_dict(m) for m in doc.get("methods", [])] or default_methods()
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        raise ValueError("scenario names must be unique")
    return scenarios, methods


def default_methods(**overrides) -> list[MethodConfig]:
    return [MethodConfig(method=m, **overrides) for m in Method]
