"""Linear-Gaussian EM problem with a prescribed Fisher triple.

The observed log-likelihood is the quadratic ``-0.5 u' I_obs u`` with
``u = theta - theta*``, the posterior KL between parameters ``a`` and
``b`` is ``0.5 (b - a)' I_mis (b - a)``, and the EM map is the exact
maximiser of the matching ``Q``:

    T(theta) = theta* + (I - I_com^{-1} I_obs) u.

Everything is linear, so ``DT`` is known in closed form.
"""

from __future__ import annotations

import numpy as np

from .em_core import as_param_vector


class LinearEmProblem:
    def __init__(self, i_com, i_obs, theta_star=None):
        self.i_com = np.array(i_com, dtype=np.float64)
        self.i_obs = np.array(i_obs, dtype=np.float64)
        d = self.i_com.shape[0]
        if self.i_com.shape != (d, d) or self.i_obs.shape != (d, d):
            raise ValueError("information matrices must be square and of equal size")
        np.linalg.cholesky(self.i_com)
        self.i_mis = self.i_com - self.i_obs
        if np.linalg.eigvalsh(0.5 * (self.i_mis + self.i_mis.T))[0] < -1e-12:
            raise ValueError("I_com - I_obs must be positive semi-definite")
        self.dimension = d
        self.theta_star = np.zeros(d) if theta_star is None else as_param_vector(theta_star, d)
        self.dt = np.eye(d) - np.linalg.solve(self.i_com, self.i_obs)

    @classmethod
    def from_spectrum(cls, g_eigenvalues, theta_star=None) -> "LinearEmProblem":
        """Identity ``I_com`` and diagonal ``I_obs``, so ``G`` has exactly
        the given eigenvalues (each in ``[0, 1]``)."""
        g = np.asarray(g_eigenvalues, dtype=np.float64)
        return cls(np.eye(g.size), np.diag(g), theta_star)

    def is_valid(self, theta) -> bool:
        return bool(np.all(np.isfinite(theta)))

    def log_likelihood(self, theta) -> float:
        u = np.asarray(theta, dtype=np.float64) - self.theta_star
        return float(-0.5 * u @ self.i_obs @ u)

    def loglik_gain(self, theta_a, theta_b) -> float:
        # factored form keeps the relative accuracy of small differences
        a = np.asarray(theta_a, dtype=np.float64)
        b = np.asarray(theta_b, dtype=np.float64)
        return float(-0.5 * (a - b) @ self.i_obs @ (a + b - 2.0 * self.theta_star))

    def em_step(self, theta) -> np.ndarray:
        u = np.asarray(theta, dtype=np.float64) - self.theta_star
        return self.theta_star + self.dt @ u

    def q_function(self, theta_new, theta_old) -> float:
        d = np.asarray(theta_new, dtype=np.float64) - np.asarray(theta_old, dtype=np.float64)
        # the posterior entropy at theta_old is dropped: it cancels in every Q difference
        return self.log_likelihood(theta_new) - 0.5 * float(d @ self.i_mis @ d)

    def posterior_kl(self, theta_a, theta_b) -> float:
        d = np.asarray(theta_b, dtype=np.float64) - np.asarray(theta_a, dtype=np.float64)
        return 0.5 * float(d @ self.i_mis @ d)

    def complete_information(self, theta) -> np.ndarray:
        return self.i_com.copy()

    def posterior(self, theta):
        raise NotImplementedError("the latent variable is continuous")

    def complete_data_score(self, theta, x, k):
        raise NotImplementedError("the latent variable is continuous")

    def complete_data_hessian(self, theta, x, k):
        raise NotImplementedError("the latent variable is continuous")
