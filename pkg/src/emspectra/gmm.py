"""Univariate Gaussian mixture backend.

Parameter vectors use the raw layout ``[w_1, ..., w_{K-1}, mu_1, sigma_1,
..., mu_K, sigma_K]`` (``d = 3K - 1``); for two components this is
``[w1, mu1, sigma1, mu2, sigma2]``.  The last weight is implicit.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .em_core import DegenerateParameterError

LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_FLOOR = 1e-6
MIN_EFFECTIVE_COUNT = 1e-12


class ComponentCollapseError(DegenerateParameterError):
    """A component received (numerically) zero posterior mass."""


class SigmaFloorWarning(RuntimeWarning):
    """The M-step clamped a standard deviation to the floor."""


@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=np.float64).reshape(-1)
        if not (w.shape == mu.shape == sigma.shape):
            raise ValueError("weights, mu and sigma must have the same length")
        if w.size < 1:
            raise ValueError("need at least one component")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise DegenerateParameterError("non-finite mixture parameter")
        if np.any(w < 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must lie on the simplex, got {w}")
        if np.any(sigma <= 0):
            raise DegenerateParameterError(f"sigma must be positive, got {sigma}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def w1(self) -> float:
        return float(self.weights[0])

    @classmethod
    def two(cls, w1: float, mu, sigma) -> "GmmParams":
        return cls(np.array([w1, 1.0 - w1]), mu, sigma)

    def to_vector(self) -> np.ndarray:
        pairs = np.column_stack([self.mu, self.sigma]).reshape(-1)
        return np.concatenate([self.weights[:-1], pairs])

    @classmethod
    def from_vector(cls, theta, n_components: int = 2) -> "GmmParams":
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        K = n_components
        if theta.size != 3 * K - 1:
            raise ValueError(f"expected {3 * K - 1} entries for K={K}, got {theta.size}")
        head = theta[: K - 1]
        weights = np.append(head, 1.0 - head.sum())
        pairs = theta[K - 1:].reshape(K, 2)
        return cls(weights, pairs[:, 0], pairs[:, 1])


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    seed: int = 0

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        if x.size < 2:
            raise ValueError("a dataset needs at least two observations")
        if not np.all(np.isfinite(x)):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "x", x)

    def __len__(self):
        return self.x.size

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{v!r}\n" for v in self.x.tolist()))

    @classmethod
    def load(cls, path) -> "Dataset":
        lines = Path(path).read_text().split()
        return cls(np.array([float(s) for s in lines]), seed=0)


def _log_joint(params: GmmParams, x: np.ndarray) -> np.ndarray:
    # N x K matrix of log w_k + log phi(x_i; mu_k, sigma_k)
    z = (x[:, None] - params.mu[None, :]) / params.sigma[None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(params.weights)
    return logw[None, :] - np.log(params.sigma)[None, :] - 0.5 * LOG_2PI - 0.5 * z * z


def _log_normalizer(lj: np.ndarray) -> np.ndarray:
    m = lj.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(lj - m).sum(axis=1, keepdims=True)))[:, 0]


def log_responsibilities(params: GmmParams, data: Dataset) -> np.ndarray:
    lj = _log_joint(params, data.x)
    # normalising the shifted values keeps tied components exactly tied
    shifted = lj - lj.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def e_step(params: GmmParams, data: Dataset) -> np.ndarray:
    """Posterior component probabilities, an ``N x K`` row-stochastic matrix.

    Evaluated in log space with max-subtraction, so widely separated
    components neither underflow nor overflow.
    """
    r = np.exp(log_responsibilities(params, data))
    return r / r.sum(axis=1, keepdims=True)


def m_step(resp: np.ndarray, data: Dataset, sigma_floor: float = SIGMA_FLOOR) -> GmmParams:
    """Closed-form maximizer of Q given responsibilities.

    Raises :class:`ComponentCollapseError` when a component's effective
    count falls below ``1e-12``; standard deviations below ``sigma_floor``
    are clamped with a :class:`SigmaFloorWarning`.
    """
    resp = np.asarray(resp, dtype=np.float64)
    x = data.x
    nk = resp.sum(axis=0)
    K = nk.size
    for k in np.flatnonzero(nk < MIN_EFFECTIVE_COUNT):
        coord = min(int(k), K - 2) if K > 1 else -1
        raise ComponentCollapseError(f"component {k} has effective count {nk[k]:.3g}", coordinate=coord)
    weights = nk / x.size
    mu = resp.T @ x / nk
    var = np.einsum("ik,ik->k", resp, (x[:, None] - mu[None, :]) ** 2) / nk
    sigma = np.sqrt(np.maximum(var, 0.0))
    low = sigma < sigma_floor
    if np.any(low):
        warnings.warn(
            f"sigma clamped to {sigma_floor:g} for components {np.flatnonzero(low).tolist()}",
            SigmaFloorWarning,
            stacklevel=2,
        )
        sigma = np.where(low, sigma_floor, sigma)
    return GmmParams(weights, mu, sigma)


def log_likelihood(params: GmmParams, data: Dataset) -> float:
    return float(_log_normalizer(_log_joint(params, data.x)).sum())


def q_function(params_new: GmmParams, params_old: GmmParams, data: Dataset) -> float:
    """Expected complete-data log-likelihood of ``params_new`` under the
    posterior at ``params_old``."""
    r = e_step(params_old, data)
    lj = _log_joint(params_new, data.x)
    terms = np.where(r > 0, r * lj, 0.0)
    return float(terms.sum())


def posterior_kl(params_a: GmmParams, params_b: GmmParams, data: Dataset) -> float:
    """Summed per-observation KL divergence between the two posteriors.

    Returns ``inf`` when ``b`` assigns zero mass where ``a`` does not.
    """
    la = log_responsibilities(params_a, data)
    lb = log_responsibilities(params_b, data)
    ra = np.exp(la)
    pos = ra > 0
    if np.any(pos & np.isneginf(lb)):
        return float("inf")
    return float(np.where(pos, ra * (la - np.where(pos, lb, 0.0)), 0.0).sum())


def _weight_score(weights: np.ndarray, k: int) -> np.ndarray:
    K = weights.size
    g = np.zeros(K - 1)
    if k < K - 1:
        g[k] += 1.0 / weights[k]
    else:
        g -= 1.0 / weights[K - 1]
    return g


def complete_data_score(params: GmmParams, x: float, k: int) -> np.ndarray:
    """Gradient of ``log w_k + log phi(x; mu_k, sigma_k)`` in the raw layout."""
    K = params.n_components
    g = np.zeros(3 * K - 1)
    g[: K - 1] = _weight_score(params.weights, k)
    mu, s = params.mu[k], params.sigma[k]
    j = K - 1 + 2 * k
    g[j] = (x - mu) / s**2
    g[j + 1] = -1.0 / s + (x - mu) ** 2 / s**3
    return g


def complete_data_hessian(params: GmmParams, x: float, k: int) -> np.ndarray:
    """Hessian of the same complete-data log density."""
    K = params.n_components
    d = 3 * K - 1
    H = np.zeros((d, d))
    w = params.weights
    if k < K - 1:
        H[k, k] -= 1.0 / w[k] ** 2
    else:
        H[: K - 1, : K - 1] -= 1.0 / w[K - 1] ** 2
    mu, s = params.mu[k], params.sigma[k]
    dx = x - mu
    j = K - 1 + 2 * k
    H[j, j] = -1.0 / s**2
    H[j, j + 1] = H[j + 1, j] = -2.0 * dx / s**3
    H[j + 1, j + 1] = 1.0 / s**2 - 3.0 * dx**2 / s**4
    return H


def score_tensor(params: GmmParams, x: np.ndarray) -> np.ndarray:
    """All complete-data scores at once, shape ``N x K x d``."""
    K = params.n_components
    N = x.size
    S = np.zeros((N, K, 3 * K - 1))
    for k in range(K):
        S[:, k, : K - 1] = _weight_score(params.weights, k)
        dx = x - params.mu[k]
        s = params.sigma[k]
        j = K - 1 + 2 * k
        S[:, k, j] = dx / s**2
        S[:, k, j + 1] = -1.0 / s + dx**2 / s**3
    return S


def expected_neg_hessian(params: GmmParams, data: Dataset, resp: np.ndarray | None = None) -> np.ndarray:
    """Posterior-weighted negative complete-data Hessian summed over the data."""
    if resp is None:
        resp = e_step(params, data)
    K = params.n_components
    d = 3 * K - 1
    x = data.x
    out = np.zeros((d, d))
    w = params.weights
    for k in range(K):
        rk = resp[:, k]
        nk = rk.sum()
        if k < K - 1:
            out[k, k] += nk / w[k] ** 2
        else:
            out[: K - 1, : K - 1] += nk / w[K - 1] ** 2
        dx = x - params.mu[k]
        s = params.sigma[k]
        j = K - 1 + 2 * k
        out[j, j] += nk / s**2
        cross = 2.0 * (rk @ dx) / s**3
        out[j, j + 1] += cross
        out[j + 1, j] += cross
        out[j + 1, j + 1] += -nk / s**2 + 3.0 * (rk @ dx**2) / s**4
    return out


def box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Standard normals from uniforms on [0, 1) (cosine branch only)."""
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def generate_dataset(true_params: GmmParams, n: int, seed: int) -> Dataset:
    """Draw ``n`` observations reproducibly.

    The stream is numpy's PCG64 seeded with ``seed``.  Each draw consumes
    three uniforms in order: one selects the component by inverse CDF on
    the weights, two feed the Box-Muller transform.
    """
    if n < 2:
        raise ValueError("n must be at least 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    u = rng.random((n, 3))
    cdf = np.cumsum(true_params.weights)
    cdf[-1] = np.inf
    comp = np.searchsorted(cdf, u[:, 0], side="right")
    z = box_muller(u[:, 1], u[:, 2])
    x = true_params.mu[comp] + true_params.sigma[comp] * z
    return Dataset(x, seed=seed)


class GmmProblem:
    """EM problem for a univariate mixture on a fixed dataset.

    Implements :class:`emspectra.em_core.EmProblem` on raw parameter
    vectors.
    """

    def __init__(self, data: Dataset, n_components: int = 2, sigma_floor: float = SIGMA_FLOOR):
        self.data = data
        self.n_components = n_components
        self.dimension = 3 * n_components - 1
        self.sigma_floor = sigma_floor

    def params(self, theta) -> GmmParams:
        theta = np.asarray(theta, dtype=np.float64)
        bad = self.invalid_coordinate(theta)
        if bad is not None:
            raise DegenerateParameterError(f"parameter {bad} out of range in {theta}", coordinate=bad)
        return GmmParams.from_vector(theta, self.n_components)

    def invalid_coordinate(self, theta) -> int | None:
        """Index of the first constraint violation, or ``None``."""
        theta = np.asarray(theta, dtype=np.float64)
        K = self.n_components
        if theta.shape != (self.dimension,):
            raise ValueError(f"expected shape ({self.dimension},), got {theta.shape}")
        nonfinite = np.flatnonzero(~np.isfinite(theta))
        if nonfinite.size:
            return int(nonfinite[0])
        head = theta[: K - 1]
        for j in range(K - 1):
            if not 0.0 < head[j] < 1.0:
                return j
        if K > 1 and not head.sum() < 1.0:
            return K - 2
        for k in range(K):
            j = K - 1 + 2 * k + 1
            if not theta[j] > 0.0:
                return j
        return None

    def is_valid(self, theta) -> bool:
        return self.invalid_coordinate(theta) is None

    def log_likelihood(self, theta) -> float:
        return log_likelihood(self.params(theta), self.data)

    def loglik_gain(self, theta_a, theta_b) -> float:
        """``log_likelihood(a) - log_likelihood(b)``, differenced per observation."""
        la = _log_normalizer(_log_joint(self.params(theta_a), self.data.x))
        lb = _log_normalizer(_log_joint(self.params(theta_b), self.data.x))
        return float(np.sum(la - lb))

    def em_step(self, theta) -> np.ndarray:
        p = self.params(theta)
        return m_step(e_step(p, self.data), self.data, self.sigma_floor).to_vector()

    def q_function(self, theta_new, theta_old) -> float:
        return q_function(self.params(theta_new), self.params(theta_old), self.data)

    def posterior(self, theta) -> np.ndarray:
        return e_step(self.params(theta), self.data)

    def posterior_kl(self, theta_a, theta_b) -> float:
        return posterior_kl(self.params(theta_a), self.params(theta_b), self.data)

    def complete_data_score(self, theta, x: float, k: int) -> np.ndarray:
        return complete_data_score(self.params(theta), x, k)

    def complete_data_hessian(self, theta, x: float, k: int) -> np.ndarray:
        return complete_data_hessian(self.params(theta), x, k)

    def complete_information(self, theta) -> np.ndarray:
        return expected_neg_hessian(self.params(theta), self.data)

    def missing_information(self, theta) -> np.ndarray:
        """Louis form: summed posterior covariance of the complete-data score."""
        p = self.params(theta)
        r = e_step(p, self.data)
        S = score_tensor(p, self.data.x)
        second = np.einsum("ik,ika,ikb->ab", r, S, S)
        mean = np.einsum("ik,ika->ia", r, S)
        return second - mean.T @ mean
