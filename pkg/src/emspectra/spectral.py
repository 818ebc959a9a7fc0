"""Fisher information, the EM Jacobian and the spectrum of ``I - DT``.

The relaxation operator ``G = I - DT`` is similar to the symmetric matrix
``L^{-1} I_obs L^{-T}`` (``L`` the Cholesky factor of ``I_com``), so its
spectrum is computed from that symmetric form with a cyclic Jacobi solver.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .em_core import DegenerateParameterError, EmProblem, loglik_gain


class NonRegularPointError(ValueError):
    """The complete-data information is not positive definite."""


class SpectralEstimateWarning(RuntimeWarning):
    """A matrix-free eigenvalue estimate did not settle."""


@dataclass(frozen=True)
class FisherTriple:
    i_com: np.ndarray
    i_obs: np.ndarray
    i_mis: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("i_com", "i_obs", "i_mis")}


@dataclass(frozen=True)
class RelaxationAnalysis:
    dt: np.ndarray
    g: np.ndarray
    eigenvalues: np.ndarray
    lambda_min: float
    lambda_max: float
    rho_em: float
    beta_star: float
    rho_acc: float
    # symmetrized operator and the Cholesky factor of I_com used to build it
    sym: np.ndarray
    chol: np.ndarray

    @property
    def g_norm(self) -> float:
        """Operator norm of ``G`` in the ``I_com`` metric."""
        return float(np.max(np.abs(self.eigenvalues)))

    def to_dict(self) -> dict:
        return {
            "dt": self.dt.tolist(),
            "g": self.g.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "lambda_min": self.lambda_min,
            "lambda_max": self.lambda_max,
            "rho_em": self.rho_em,
            "beta_star": self.beta_star,
            "rho_acc": self.rho_acc,
        }


def optimal_momentum(lambda_min: float) -> float:
    s = math.sqrt(lambda_min)
    return (1.0 - s) / (1.0 + s)


def jacobi_eigenvalues(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm is at most ``tol`` times
    the matrix norm (absolute ``tol`` for a zero matrix).  Returns them
    sorted ascending.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("expected a square matrix")
    a = 0.5 * (a + a.T)
    scale = max(np.linalg.norm(a), 1.0)

    mask = ~np.eye(n, dtype=bool)

    def off(m):
        return float(np.linalg.norm(m[mask]))

    for _ in range(max_sweeps):
        if off(a) <= tol * scale:
            return np.sort(np.diag(a).copy())
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.hypot(theta, 1.0))
                c = 1.0 / math.hypot(t, 1.0)
                s = t * c
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
    if off(a) <= tol * scale:
        return np.sort(np.diag(a).copy())
    raise RuntimeError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def _fd_steps(theta: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(theta))


def _shrunk_step(problem: EmProblem, theta: np.ndarray, direction: np.ndarray, h: float) -> float:
    # halve h (at most 10 times) until both theta +/- h*direction are valid
    for _ in range(11):
        if problem.is_valid(theta + h * direction) and problem.is_valid(theta - h * direction):
            return h
        h *= 0.5
    raise DegenerateParameterError("finite-difference perturbation leaves the valid region")


def jacobian_fd(problem: EmProblem, theta, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of the EM map.

    Coordinate ``j`` uses step ``h * max(1, |theta_j|)``, halved up to ten
    times if a perturbed point would be invalid.
    """
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.size
    steps = _fd_steps(theta, h)
    J = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        hj = _shrunk_step(problem, theta, e, steps[j])
        J[:, j] = (problem.em_step(theta + hj * e) - problem.em_step(theta - hj * e)) / (2.0 * hj)
    return J


def _fd_hessian(problem: EmProblem, theta: np.ndarray, steps: np.ndarray) -> np.ndarray:
    d = theta.size

    def f(delta):
        return loglik_gain(problem, theta + delta, theta)

    H = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = steps[i]
        H[i, i] = (f(ei) + f(-ei)) / steps[i] ** 2
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = steps[j]
            H[i, j] = H[j, i] = (f(ei + ej) - f(ei - ej) - f(ej - ei) + f(-ei - ej)) / (
                4.0 * steps[i] * steps[j]
            )
    return H


def observed_information(problem: EmProblem, theta, rel_step: float = 1e-4,
                         richardson: bool = True) -> np.ndarray:
    """Negative central-difference Hessian of the observed log-likelihood.

    Coordinate ``j`` uses step ``rel_step * max(1, |theta_j|)``.  Stencil
    values are gains relative to ``theta`` (see :func:`loglik_gain`), so
    rounding stays far below truncation error.  With ``richardson`` the
    stencil is repeated at half the step and the two are combined as
    ``(4 H(h/2) - H(h)) / 3``, cancelling the ``h^2`` error term.
    """
    theta = np.asarray(theta, dtype=np.float64)
    d = theta.size
    steps = _fd_steps(theta, rel_step)
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        # need room for the +/-h_i +/-h_j corners as well
        steps[j] = _shrunk_step(problem, theta, 2.0 * e, steps[j])
    H = _fd_hessian(problem, theta, steps)
    if richardson:
        H = (4.0 * _fd_hessian(problem, theta, 0.5 * steps) - H) / 3.0
    return -H


def complete_information(problem: EmProblem, theta, data=None) -> np.ndarray:
    """Posterior-weighted negative complete-data Hessian, summed over data.

    A backend's own ``complete_information`` is used when no explicit
    ``data`` is given.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if data is None and hasattr(problem, "complete_information"):
        return problem.complete_information(theta)
    data_x = _data_x(problem, data)
    r = problem.posterior(theta)
    d = theta.size
    out = np.zeros((d, d))
    for i, x in enumerate(data_x):
        for k in range(r.shape[1]):
            if r[i, k] > 0:
                out -= r[i, k] * problem.complete_data_hessian(theta, x, k)
    return out


def _data_x(problem: EmProblem, data):
    if data is None:
        data = problem.data
    return getattr(data, "x", data)


def fisher_triple(problem: EmProblem, theta, data=None) -> FisherTriple:
    """Complete, observed and missing information at ``theta``.

    ``data`` defaults to the problem's own dataset.  Raises
    :class:`NonRegularPointError` if ``I_com`` is not positive definite.
    """
    theta = np.asarray(theta, dtype=np.float64)
    i_com = complete_information(problem, theta, data)
    i_com = 0.5 * (i_com + i_com.T)
    try:
        np.linalg.cholesky(i_com)
    except np.linalg.LinAlgError as exc:
        raise NonRegularPointError("complete-data information is not positive definite") from exc
    i_obs = observed_information(problem, theta)
    i_obs = 0.5 * (i_obs + i_obs.T)
    return FisherTriple(i_com, i_obs, i_com - i_obs)


def louis_mis(problem: EmProblem, theta, data=None) -> np.ndarray:
    """Missing information as the posterior covariance of the complete-data score.

    Observations are treated as independent, so the covariance is summed
    per observation.
    """
    theta = np.asarray(theta, dtype=np.float64)
    r = problem.posterior(theta)
    d = theta.size
    out = np.zeros((d, d))
    for i, x in enumerate(_data_x(problem, data)):
        scores = np.array([problem.complete_data_score(theta, x, k) for k in range(r.shape[1])])
        mean = r[i] @ scores
        out += (scores.T * r[i]) @ scores - np.outer(mean, mean)
    return out


def relaxation_analysis(dt: np.ndarray, triple: FisherTriple) -> RelaxationAnalysis:
    """Spectral summary of ``G = I - dt`` using the Fisher triple.

    The eigenvalues come from the symmetrized ``L^{-1} I_obs L^{-T}``;
    the derived rates use the smallest one clipped to ``[1e-12, 1]``.
    """
    dt = np.asarray(dt, dtype=np.float64)
    d = dt.shape[0]
    try:
        L = np.linalg.cholesky(triple.i_com)
    except np.linalg.LinAlgError as exc:
        raise NonRegularPointError("complete-data information is not positive definite") from exc
    Linv_obs = np.linalg.solve(L, triple.i_obs)
    sym = np.linalg.solve(L, Linv_obs.T).T
    sym = 0.5 * (sym + sym.T)
    eig = jacobi_eigenvalues(sym)
    lam_min = float(np.clip(eig[0], 1e-12, 1.0))
    lam_max = float(np.clip(eig[-1], 1e-12, 1.0))
    return RelaxationAnalysis(
        dt=dt,
        g=np.eye(d) - dt,
        eigenvalues=eig,
        lambda_min=lam_min,
        lambda_max=lam_max,
        rho_em=1.0 - lam_min,
        beta_star=optimal_momentum(lam_min),
        rho_acc=1.0 - math.sqrt(lam_min),
        sym=sym,
        chol=L,
    )


def triple_equivalence_residual(dt: np.ndarray, triple: FisherTriple) -> float:
    """Relative Frobenius gap between ``I - dt`` and ``I_com^{-1} I_obs``.

    Falls back to the absolute gap when ``I_com^{-1} I_obs`` vanishes.
    """
    dt = np.asarray(dt, dtype=np.float64)
    ratio = np.linalg.solve(triple.i_com, triple.i_obs)
    gap = np.linalg.norm(np.eye(dt.shape[0]) - dt - ratio)
    ref = np.linalg.norm(ratio)
    return float(gap / ref) if ref > 0 else float(gap)


def self_adjointness_residual(g: np.ndarray, i_com: np.ndarray) -> float:
    lhs = i_com @ g
    return float(np.linalg.norm(lhs - g.T @ i_com) / np.linalg.norm(lhs))


@dataclass(frozen=True)
class PowerEstimate:
    lambda_min: float
    rho: float
    vector: np.ndarray
    settled: bool
    history: np.ndarray


def power_iteration_dt(problem: EmProblem, theta, h: float = 1e-5, iters: int = 200,
                       v0=None, seed: int = 0) -> PowerEstimate:
    """Power iteration on matrix-free central-difference products with ``DT``.

    The Rayleigh quotient of the normalised iterate estimates the spectral
    radius of ``DT``; ``1 - rho`` estimates the smallest eigenvalue of
    ``I - DT``.  The estimate counts as settled when the last ten Rayleigh
    quotients span at most ``1e-3``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if v0 is None:
        v = np.random.default_rng(seed).standard_normal(theta.size)
    else:
        v = np.array(v0, dtype=np.float64)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ValueError("starting vector must be nonzero")
    v /= nv
    history = []
    for _ in range(iters):
        hv = _shrunk_step(problem, theta, v, h)
        w = (problem.em_step(theta + hv * v) - problem.em_step(theta - hv * v)) / (2.0 * hv)
        history.append(float(v @ w))
        nw = np.linalg.norm(w)
        if nw == 0.0:
            v = w
            break
        v = w / nw
    history = np.array(history)
    rho = history[-1] if history.size else 0.0
    tail = history[-10:]
    settled = bool(tail.size == 0 or np.ptp(tail) <= 1e-3)
    return PowerEstimate(1.0 - rho, rho, v, settled, history)


def power_lambda_min(problem: EmProblem, theta, h: float = 1e-5, iters: int = 200, v0=None) -> float:
    """Matrix-free estimate of the smallest eigenvalue of ``I - DT``.

    Warns with :class:`SpectralEstimateWarning` if the Rayleigh sequence is
    still oscillating by more than ``1e-3`` at the end.
    """
    est = power_iteration_dt(problem, theta, h, iters, v0)
    if not est.settled:
        warnings.warn("power iteration did not settle", SpectralEstimateWarning, stacklevel=2)
    return est.lambda_min


def trajectory_lambda_hat(theta_k, theta_km1, theta_km2) -> float | None:
    """One minus the ratio of the last two step norms.

    Returns ``None`` when the older step has (numerically) zero length.
    """
    num = np.linalg.norm(np.asarray(theta_k) - np.asarray(theta_km1))
    den = np.linalg.norm(np.asarray(theta_km1) - np.asarray(theta_km2))
    if not den > 1e-300:
        return None
    return float(1.0 - num / den)


def com_norm(u, i_com: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    return float(math.sqrt(max(u @ i_com @ u, 0.0)))


def contraction_radius_estimate(problem: EmProblem, theta_star, analysis: RelaxationAnalysis,
                                samples: int = 32, seed: int = 0,
                                scales=(0.25, 0.5, 1.0)) -> float:
    """Sampled version of the explicit local-contraction radius.

    The second-derivative bound is estimated as half the largest
    ``||T(x+tv) - 2T(x) + T(x-tv)|| / t^2`` over random directions ``v`` of
    unit ``I_com`` length; every norm is the ``I_com`` norm.  Directions
    whose perturbations leave the valid region are skipped.
    """
    if not analysis.lambda_min > 0:
        raise ValueError("lambda_min must be positive")
    theta_star = np.asarray(theta_star, dtype=np.float64)
    L = analysis.chol
    i_com = L @ L.T
    rng = np.random.default_rng(seed)
    t_star = problem.em_step(theta_star)
    best = 0.0
    used = 0
    for _ in range(samples):
        z = rng.standard_normal(theta_star.size)
        z /= np.linalg.norm(z)
        # L^T v = z gives ||v||_{I_com} = 1
        v = np.linalg.solve(L.T, z)
        for t in scales:
            plus, minus = theta_star + t * v, theta_star - t * v
            if not (problem.is_valid(plus) and problem.is_valid(minus)):
                continue
            try:
                second = problem.em_step(plus) - 2.0 * t_star + problem.em_step(minus)
            except DegenerateParameterError:
                continue
            used += 1
            best = max(best, com_norm(second, i_com) / t**2)
    if used == 0:
        raise DegenerateParameterError("every probe direction left the valid region")
    m2 = 0.5 * best
    return radius_formula(analysis.lambda_min, m2, analysis.g_norm)


def radius_formula(lambda_min: float, m2: float, g_norm: float) -> float:
    return lambda_min / (4.0 * m2 + 2.0 * g_norm**2)
