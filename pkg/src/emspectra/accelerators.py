"""Plain EM and three spectrum-driven accelerations under one runner.

Every corrected step is safeguarded against the plain EM step taken from
the same point: the candidate is kept only if its log-likelihood is
strictly higher than that of ``T(theta_k)``.  Otherwise ``T(theta_k)`` is
taken and the step is flagged as a fallback.  The comparison is differenced
per observation when the problem offers ``loglik_gain``, because near the
fixed point the gains involved are far below the rounding error of the
summed log-likelihood.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from enum import Enum

import numpy as np

from .em_core import (
    DegenerateParameterError,
    EmProblem,
    RunResult,
    StopRule,
    as_param_vector,
    check_valid,
    loglik_gain,
    run_em,
)
from .spectral import optimal_momentum, power_iteration_dt, trajectory_lambda_hat


class Method(str, Enum):
    EM = "EM"
    G_ACCEL = "G_ACCEL"
    DCC_FIXED = "DCC_FIXED"
    GEO_ADAPTIVE = "GEO_ADAPTIVE"


@dataclass(frozen=True)
class MethodConfig:
    method: Method = Method.EM
    gamma_fixed: float = 8.0
    lambda_floor: float = 1e-3
    lambda_ceiling: float = 1.0 - 1e-6
    gamma_max: float = 1e3
    beta_override: float | None = None
    respect_lambda_refresh: int = 20
    warmup: int = 3
    power_iters: int = 30
    fd_step: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if not 0 < self.lambda_floor < self.lambda_ceiling < 1:
            raise ValueError("need 0 < lambda_floor < lambda_ceiling < 1")
        if not self.gamma_max > 0:
            raise ValueError("gamma_max must be positive")
        if self.warmup < 2:
            raise ValueError("warmup must be at least 2")
        if self.respect_lambda_refresh < 1:
            raise ValueError("respect_lambda_refresh must be at least 1")
        if self.power_iters < 1:
            raise ValueError("power_iters must be at least 1")

    @property
    def label(self) -> str:
        return self.method.value

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MethodConfig":
        return cls(**d)


@dataclass
class GeoState:
    """Trajectory window and diagnostics carried between Geo-Adaptive steps."""

    prev: np.ndarray
    prev2: np.ndarray | None = None
    lambda_hat: float | None = None
    gamma_k: float | None = None
    r_k: np.ndarray | None = None
    u_k: np.ndarray | None = None
    fallback_count: int = 0
    # last positive estimate, reused when the raw estimate is not positive
    lambda_valid: float | None = None


def _safeguard(problem: EmProblem, em_point: np.ndarray, candidate: np.ndarray | None,
               info: dict | None) -> np.ndarray:
    accept = False
    if candidate is not None and problem.is_valid(candidate):
        accept = loglik_gain(problem, candidate, em_point) > 0.0
    if info is not None:
        info["fallback"] = not accept
    return candidate if accept else em_point


def step_em(problem: EmProblem, theta) -> np.ndarray:
    return problem.em_step(np.asarray(theta, dtype=np.float64))


def step_g_accel(problem: EmProblem, theta_k, theta_km1, lambda_min_est: float,
                 info: dict | None = None, beta: float | None = None, safeguard: bool = True) -> np.ndarray:
    """Momentum step ``T(theta_k + beta (theta_k - theta_{k-1}))``.

    ``beta`` defaults to ``(1 - sqrt(lam)) / (1 + sqrt(lam))`` for
    ``lam = lambda_min_est``.  The momentum is halved (at most ten times)
    until the extrapolated point is valid; if it never is, the plain EM
    step is returned as a fallback.  ``safeguard=False`` skips the
    likelihood comparison and gives the bare momentum recurrence.
    """
    theta_k = np.asarray(theta_k, dtype=np.float64)
    theta_km1 = np.asarray(theta_km1, dtype=np.float64)
    if beta is None:
        beta = optimal_momentum(min(max(lambda_min_est, 0.0), 1.0))
    em_point = problem.em_step(theta_k)
    if info is not None:
        info["beta"] = beta
    if beta == 0.0:
        if info is not None:
            info["fallback"] = False
        return em_point
    candidate = None
    b = beta
    for _ in range(11):
        tilde = theta_k + b * (theta_k - theta_km1)
        if problem.is_valid(tilde):
            try:
                candidate = problem.em_step(tilde)
            except DegenerateParameterError:
                candidate = None
            break
        b *= 0.5
    if info is not None:
        info["beta"] = b
    if not safeguard and candidate is not None:
        if info is not None:
            info["fallback"] = False
        return candidate
    return _safeguard(problem, em_point, candidate, info)


def step_dcc(problem: EmProblem, theta_k, state: GeoState, gamma: float,
             info: dict | None = None) -> np.ndarray:
    """Tangent-corrected EM step ``M(theta) + gamma <r, u> u``.

    ``u`` is the unit vector along the last accepted move
    ``theta_k - state.prev`` and ``r`` the EM residual at ``theta_k``.  A
    zero tangent or ``gamma == 0`` gives the plain EM step.
    """
    theta_k = np.asarray(theta_k, dtype=np.float64)
    em_point = problem.em_step(theta_k)
    r = em_point - theta_k
    move = theta_k - np.asarray(state.prev, dtype=np.float64)
    n = np.linalg.norm(move)
    state.r_k = r
    if not n > 0 or gamma == 0:
        state.u_k = None
        if info is not None:
            info["fallback"] = False
        return em_point
    u = move / n
    state.u_k = u
    candidate = em_point + gamma * float(r @ u) * u
    return _safeguard(problem, em_point, candidate, info)


def adaptive_gamma(lambda_hat: float | None, cfg: MethodConfig) -> float | None:
    """``1 / lambda_hat`` with ``lambda_hat`` clipped to
    ``[lambda_floor, lambda_ceiling]`` and the result capped at
    ``gamma_max``; ``None`` passes through."""
    if lambda_hat is None:
        return None
    lam = min(max(lambda_hat, cfg.lambda_floor), cfg.lambda_ceiling)
    return min(1.0 / lam, cfg.gamma_max)


def step_geo_adaptive(problem: EmProblem, theta_k, state: GeoState, cfg: MethodConfig,
                      info: dict | None = None) -> tuple[np.ndarray, GeoState]:
    """Geometric correction with ``gamma_k = 1 / lambda_hat_k``.

    ``lambda_hat_k`` is one minus the ratio of the last two accepted step
    lengths.  A non-positive ratio estimate (the last step grew) carries no
    rate information, so the previous positive estimate is reused; with no
    previous estimate, or an undefined one, the plain EM step is taken.
    """
    theta_k = np.asarray(theta_k, dtype=np.float64)
    new = replace(state)
    raw = None if state.prev2 is None else trajectory_lambda_hat(theta_k, state.prev, state.prev2)
    if raw is not None and raw > 0:
        lam = raw
        new.lambda_valid = raw
    else:
        lam = state.lambda_valid
    gamma = adaptive_gamma(lam, cfg)
    new.lambda_hat = raw
    new.gamma_k = gamma
    if info is None:
        info = {}
    info["lambda_hat"] = raw
    info["gamma"] = gamma
    if gamma is None:
        nxt = problem.em_step(theta_k)
        new.r_k = nxt - theta_k
        info["fallback"] = True
    else:
        nxt = step_dcc(problem, theta_k, new, gamma, info)
    if info.get("fallback"):
        new.fallback_count += 1
    new.prev2 = state.prev
    new.prev = theta_k
    return nxt, new


def run_method(problem: EmProblem, theta0, stop: StopRule, cfg: MethodConfig,
               thin: bool = False) -> RunResult:
    """Run one of the four schemes from ``theta0``.

    The first ``cfg.warmup`` steps are plain EM.  Per-step diagnostics
    (``lambda_hat``, ``gamma``, ``beta``, ``lambda_est``, ``fallback``) are
    stored in ``RunResult.extras``.  Reaching ``max_iter`` gives
    ``converged=False``.  For G_ACCEL the smallest eigenvalue of ``I - DT``
    is re-estimated by matrix-free power iteration (warm-started from the
    last step) every ``respect_lambda_refresh`` iterations.
    """
    if cfg.method is Method.EM:
        res = run_em(problem, theta0, stop, thin=thin)
        res.extras = [{"fallback": False} for _ in res.step_norms]
        return res

    theta = as_param_vector(theta0, problem.dimension)
    check_valid(problem, theta)
    iterates = [theta]
    loglik = [problem.log_likelihood(theta)]
    step_norms: list[float] = []
    extras: list[dict] = []
    prev = prev2 = None
    lambda_est = None
    state = None
    converged = False
    k = 0
    while k < stop.max_iter:
        info: dict = {"fallback": False}
        if k < cfg.warmup:
            nxt = problem.em_step(theta)
        elif cfg.method is Method.G_ACCEL:
            due = (k - cfg.warmup) % cfg.respect_lambda_refresh == 0
            if cfg.beta_override is None and (lambda_est is None or due):
                v0 = theta - prev if np.any(theta != prev) else None
                est = power_iteration_dt(problem, theta, cfg.fd_step, cfg.power_iters, v0=v0)
                lambda_est = min(max(est.lambda_min, cfg.lambda_floor), 1.0)
                info["power_settled"] = est.settled
            info["lambda_est"] = lambda_est
            nxt = step_g_accel(problem, theta, prev, lambda_est, info, beta=cfg.beta_override)
        elif cfg.method is Method.DCC_FIXED:
            info["gamma"] = cfg.gamma_fixed
            nxt = step_dcc(problem, theta, GeoState(prev=prev, prev2=prev2), cfg.gamma_fixed, info)
        elif cfg.method is Method.GEO_ADAPTIVE:
            if state is None:
                state = GeoState(prev=prev, prev2=prev2)
            nxt, state = step_geo_adaptive(problem, theta, state, cfg, info)
        else:  # pragma: no cover
            raise ValueError(f"unknown method {cfg.method}")
        k += 1
        step = float(np.linalg.norm(nxt - theta))
        if not math.isfinite(step):
            raise DegenerateParameterError("non-finite step")
        prev2, prev = prev, theta
        theta = nxt
        iterates.append(theta)
        loglik.append(problem.log_likelihood(theta))
        step_norms.append(step)
        extras.append(info)
        if thin and len(iterates) > 3:
            del iterates[0]
            del loglik[0]
        if step < stop.tol_step:
            converged = True
            break
    return RunResult(iterates, loglik, step_norms, k, converged, extras)


def locate_fixed_point(problem: EmProblem, theta0, tol: float = 1e-12, max_iter: int = 50000) -> np.ndarray:
    """Operational fixed point reached quickly.

    Runs Geo-Adaptive to ``tol`` and then plain EM from its end point until
    a plain step is shorter than ``tol``, so the result is certified by
    the EM map itself.
    """
    stop = StopRule(tol, max_iter)
    fast = run_method(problem, theta0, stop, MethodConfig(method=Method.GEO_ADAPTIVE), thin=True)
    polish = run_em(problem, fast.final, stop, thin=True)
    if not polish.converged:
        raise RuntimeError(f"no fixed point within {max_iter} plain EM steps")
    return polish.final
