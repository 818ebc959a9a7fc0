"""Trajectory diagnostics: energy split, local quadratic form, rate fits.

All ``I_com``-weighted quantities take the complete-data information at the
reference fixed point, never at the current iterate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .em_core import DegenerateParameterError, EmProblem, RunResult, loglik_gain
from .spectral import RelaxationAnalysis, com_norm


@dataclass(frozen=True)
class EnergyDecomposition:
    ell_gain: float
    delta_q: float
    kl_transport: float
    residual: float

    def to_dict(self) -> dict:
        return asdict(self)


def energy_decompose(problem: EmProblem, theta, theta_next=None) -> EnergyDecomposition:
    """Split the one-step gain ``l(T(theta)) - l(theta)`` into the M-step
    ascent of ``Q`` and the posterior KL from ``theta`` to ``T(theta)``.

    ``theta_next`` may be passed to reuse an EM step already computed.
    """
    theta = np.asarray(theta, dtype=np.float64)
    nxt = problem.em_step(theta) if theta_next is None else np.asarray(theta_next, dtype=np.float64)
    gain = loglik_gain(problem, nxt, theta)
    dq = problem.q_function(nxt, theta) - problem.q_function(theta, theta)
    kl = problem.posterior_kl(theta, nxt)
    return EnergyDecomposition(gain, dq, kl, gain - dq - kl)


def energy_trace(problem: EmProblem, run: RunResult) -> list[EnergyDecomposition]:
    """Decomposition at every plain-EM step of ``run`` (full storage needed)."""
    its = run.iterates
    return [energy_decompose(problem, a, b) for a, b in zip(its[:-1], its[1:])]


@dataclass(frozen=True)
class QuadraticPoint:
    scale: float
    predicted: float
    actual: float
    relative_error: float


@dataclass(frozen=True)
class QuadraticCheck:
    """Per-scale comparison for one probe direction.

    ``total``, ``delta_q`` and ``kl`` hold the comparison for the full gain
    and for its two components; ``slopes`` are the log-log slopes of
    ``|actual - predicted|`` against the scale.
    """

    direction: np.ndarray
    total: list[QuadraticPoint]
    delta_q: list[QuadraticPoint]
    kl: list[QuadraticPoint]
    slopes: dict

    def as_tuples(self) -> list[tuple[float, float, float, float]]:
        return [(p.scale, p.predicted, p.actual, p.relative_error) for p in self.total]


def loglog_slope(scales, errors) -> float:
    """Least-squares slope of ``log|error|`` against ``log(scale)``."""
    s = np.asarray(scales, dtype=np.float64)
    e = np.abs(np.asarray(errors, dtype=np.float64))
    keep = e > 0
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(s[keep]), np.log(e[keep]), 1)[0])


def _point(t, pred, act) -> QuadraticPoint:
    rel = abs(act - pred) / abs(pred) if pred != 0 else float("inf")
    return QuadraticPoint(t, pred, act, rel)


def local_quadratic_check(problem: EmProblem, theta_star, analysis: RelaxationAnalysis, i_com,
                          scales=(1e-1, 3e-2, 1e-2, 3e-3, 1e-3), direction=None,
                          seed: int = 0) -> QuadraticCheck:
    """Compare one-step gains near ``theta_star`` with their quadratic models.

    For ``u = t v`` the models are

    * total gain: ``0.5 u' I_com (2G^2 - G^3) u``
    * Q ascent:   ``0.5 u' I_com G^2 u``
    * KL cost:    ``0.5 u' I_com (G^2 - G^3) u``

    ``direction`` defaults to a seeded random Euclidean unit vector.  Scales
    whose perturbed point is invalid are skipped.
    """
    theta_star = np.asarray(theta_star, dtype=np.float64)
    i_com = np.asarray(i_com, dtype=np.float64)
    if direction is None:
        direction = np.random.default_rng(seed).standard_normal(theta_star.size)
    v = np.asarray(direction, dtype=np.float64)
    v = v / np.linalg.norm(v)
    g = analysis.g
    g2 = g @ g
    g3 = g2 @ g
    coef_dq = 0.5 * float(v @ i_com @ g2 @ v)
    coef_kl = 0.5 * float(v @ i_com @ (g2 - g3) @ v)
    total, dq, kl = [], [], []
    for t in scales:
        theta = theta_star + t * v
        if not problem.is_valid(theta):
            continue
        try:
            e = energy_decompose(problem, theta)
        except DegenerateParameterError:
            continue
        total.append(_point(t, t * t * (coef_dq + coef_kl), e.ell_gain))
        dq.append(_point(t, t * t * coef_dq, e.delta_q))
        kl.append(_point(t, t * t * coef_kl, e.kl_transport))

    def slope(points):
        return loglog_slope([p.scale for p in points], [p.actual - p.predicted for p in points])

    slopes = {"total": slope(total), "delta_q": slope(dq), "kl": slope(kl)}
    return QuadraticCheck(v, total, dq, kl, slopes)


def local_quadratic_sweep(problem: EmProblem, theta_star, analysis: RelaxationAnalysis, i_com,
                          scales=(1e-1, 3e-2, 1e-2, 3e-3, 1e-3)) -> list[QuadraticCheck]:
    """Run :func:`local_quadratic_check` along each coordinate axis."""
    d = np.asarray(theta_star).size
    return [local_quadratic_check(problem, theta_star, analysis, i_com, scales, direction=e)
            for e in np.eye(d)]


def rigidity_profile(run: RunResult, problem: EmProblem) -> list[float]:
    """Posterior KL from each iterate to the next."""
    its = run.iterates
    if len(its) < 2:
        raise ValueError("need at least two iterates")
    return [problem.posterior_kl(a, b) for a, b in zip(its[:-1], its[1:])]


def velocity_angles(run: RunResult) -> list[float]:
    """Angle (radians) between successive step directions; ``nan`` when a
    step has zero length."""
    steps = np.diff(np.asarray(run.iterates), axis=0)
    out = []
    for a, b in zip(steps[:-1], steps[1:]):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            out.append(float("nan"))
        else:
            out.append(float(math.acos(max(-1.0, min(1.0, (a @ b) / (na * nb))))))
    return out


@dataclass(frozen=True)
class RateFit:
    fitted_rho: float
    window: int
    r_squared: float


def default_window(step_norms, tail_below: float = 1e-3) -> int:
    """``min(50, 25% of the steps)``, further capped to the trailing run of
    steps no longer than ``tail_below`` so that a fast final approach is not
    mixed with the pre-asymptotic phase; never below 10."""
    norms = np.asarray(step_norms, dtype=np.float64)
    big = np.flatnonzero(norms > tail_below)
    small = norms.size - (big[-1] + 1 if big.size else 0)
    return max(10, min(50, norms.size // 4, small))


def fit_rate(run: RunResult | list, window: int | None = None, tail_below: float = 1e-3) -> RateFit:
    """Geometric rate from a least-squares line through the log step norms
    of the last ``window`` steps.

    ``run`` may also be a plain sequence of step norms.  ``window`` defaults
    to :func:`default_window`.
    """
    norms = np.asarray(run.step_norms if isinstance(run, RunResult) else run, dtype=np.float64)
    if window is None:
        window = default_window(norms, tail_below)
    if window < 10:
        raise ValueError("window must be at least 10")
    if norms.size < window:
        raise ValueError(f"only {norms.size} steps available, window is {window}")
    tail = norms[-window:]
    if np.any(tail <= 0):
        raise ValueError("zero step in the fit window")
    k = np.arange(window, dtype=np.float64)
    y = np.log(tail)
    slope, icpt = np.polyfit(k, y, 1)
    ss_res = float(np.sum((y - (slope * k + icpt)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(math.exp(slope)), window, r2)


def com_distances(iterates, theta_star, i_com) -> np.ndarray:
    theta_star = np.asarray(theta_star, dtype=np.float64)
    return np.array([com_norm(np.asarray(t) - theta_star, i_com) for t in iterates])


@dataclass(frozen=True)
class TwoStageReport:
    """Behaviour of ``||theta_k - theta*||_{I_com}`` relative to a radius.

    ``entry`` is the first index inside the radius (``None`` if never);
    ``max_increase`` and ``max_factor`` are taken over steps from ``entry``
    on.  ``holds`` applies the two tests with the given slacks.
    """

    entry: int | None
    radius: float
    max_increase: float
    max_factor: float
    factor_bound: float
    holds: bool


def two_stage_check(distances, radius: float, lambda_min: float, increase_slack: float = 1e-12,
                    factor_slack: float = 0.0) -> TwoStageReport:
    """Once the distance enters the ball of ``radius`` it must never grow
    (up to ``increase_slack``) and each step must contract by at most
    ``1 - lambda_min / 2`` (plus ``factor_slack``)."""
    d = np.asarray(distances, dtype=np.float64)
    bound = 1.0 - 0.5 * lambda_min + factor_slack
    inside = np.flatnonzero(d <= radius)
    if inside.size == 0:
        return TwoStageReport(None, radius, 0.0, 0.0, bound, True)
    k0 = int(inside[0])
    tail = d[k0:]
    if tail.size < 2:
        return TwoStageReport(k0, radius, 0.0, 0.0, bound, True)
    inc = float(np.max(np.diff(tail)))
    prev, nxt = tail[:-1], tail[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(prev > 0, nxt / prev, 0.0)
    mf = float(np.max(fac))
    return TwoStageReport(k0, radius, inc, mf, bound, inc <= increase_slack and mf <= bound)
