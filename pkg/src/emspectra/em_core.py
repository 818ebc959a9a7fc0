"""EM problems as deterministic fixed-point maps, and the plain-EM runner."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Protocol, runtime_checkable

import numpy as np


class DegenerateParameterError(ValueError):
    """A parameter vector left the model's valid region.

    ``coordinate`` is the index of the offending entry in the parameter
    vector (``-1`` when the violation is not tied to a single entry).
    """

    def __init__(self, message: str, coordinate: int = -1):
        super().__init__(message)
        self.coordinate = coordinate


@runtime_checkable
class EmProblem(Protocol):
    """Interface every EM backend implements.

    Parameter vectors are 1-D float64 arrays of length ``dimension``.
    ``em_step`` must be deterministic and must never decrease
    ``log_likelihood``.
    """

    dimension: int

    def is_valid(self, theta: np.ndarray) -> bool: ...

    def log_likelihood(self, theta: np.ndarray) -> float: ...

    def em_step(self, theta: np.ndarray) -> np.ndarray: ...

    def q_function(self, theta_new: np.ndarray, theta_old: np.ndarray) -> float: ...

    def posterior(self, theta: np.ndarray) -> np.ndarray: ...

    def posterior_kl(self, theta_a: np.ndarray, theta_b: np.ndarray) -> float: ...

    def complete_data_score(self, theta: np.ndarray, x: float, k: int) -> np.ndarray: ...

    def complete_data_hessian(self, theta: np.ndarray, x: float, k: int) -> np.ndarray: ...


@dataclass(frozen=True)
class StopRule:
    """Stop when the Euclidean step norm drops below ``tol_step`` or after
    ``max_iter`` steps."""

    tol_step: float = 1e-8
    max_iter: int = 2000

    def __post_init__(self):
        if not self.tol_step > 0:
            raise ValueError(f"tol_step must be positive, got {self.tol_step}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass
class RunResult:
    """Trajectory of an iterative run.

    ``iterates`` and ``loglik`` hold one entry per visited point, starting
    with the initial point; ``step_norms`` and ``extras`` hold one entry per
    step, so ``len(iterates) == len(step_norms) + 1`` in full-storage mode.
    In thin-storage mode only the last three iterates are kept.
    """

    iterates: list[np.ndarray]
    loglik: list[float]
    step_norms: list[float]
    iterations_used: int
    converged: bool
    extras: list[dict[str, Any]] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def final_loglik(self) -> float:
        return self.loglik[-1]

    @property
    def fallback_count(self) -> int:
        return sum(1 for e in self.extras if e.get("fallback"))


def as_param_vector(theta, dimension: int | None = None) -> np.ndarray:
    """Copy ``theta`` into a finite float64 vector, checking its length."""
    arr = np.array(theta, dtype=np.float64).reshape(-1)
    if dimension is not None and arr.shape[0] != dimension:
        raise ValueError(f"expected a {dimension}-vector, got length {arr.shape[0]}")
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise DegenerateParameterError(
            f"non-finite parameter at index {bad[0]}", coordinate=int(bad[0])
        )
    return arr


def check_valid(problem: EmProblem, theta: np.ndarray) -> None:
    """Raise :class:`DegenerateParameterError` if ``theta`` is invalid,
    naming the offending coordinate when the backend can tell."""
    if problem.is_valid(theta):
        return
    locate = getattr(problem, "invalid_coordinate", None)
    coord = locate(theta) if locate is not None else None
    raise DegenerateParameterError(
        f"parameter vector {theta} is outside the model's valid region",
        coordinate=-1 if coord is None else int(coord),
    )


def loglik_gain(problem: EmProblem, theta_a, theta_b) -> float:
    """``log_likelihood(theta_a) - log_likelihood(theta_b)``.

    Uses the problem's own ``loglik_gain`` when it has one (backends can
    difference per observation, which keeps tiny gains above rounding
    noise).
    """
    if hasattr(problem, "loglik_gain"):
        return float(problem.loglik_gain(theta_a, theta_b))
    return problem.log_likelihood(theta_a) - problem.log_likelihood(theta_b)


def velocity(problem: EmProblem, theta) -> np.ndarray:
    """EM velocity field ``T(theta) - theta``."""
    theta = as_param_vector(theta, problem.dimension)
    return problem.em_step(theta) - theta


def run_em(problem: EmProblem, theta0, stop: StopRule, thin: bool = False) -> RunResult:
    """Iterate the EM map from ``theta0`` until ``stop`` fires.

    Parameters
    ----------
    problem : EmProblem
    theta0 : array_like
        Starting point; must satisfy ``problem.is_valid``.
    stop : StopRule
    thin : bool
        Keep only the last three iterates (and their log-likelihoods).

    Raises
    ------
    DegenerateParameterError
        If an iterate violates the model constraints.
    """
    theta = as_param_vector(theta0, problem.dimension)
    check_valid(problem, theta)
    iterates = [theta]
    loglik = [problem.log_likelihood(theta)]
    step_norms: list[float] = []
    converged = False
    k = 0
    while k < stop.max_iter:
        nxt = problem.em_step(theta)
        k += 1
        step = float(np.linalg.norm(nxt - theta))
        theta = nxt
        iterates.append(theta)
        loglik.append(problem.log_likelihood(theta))
        step_norms.append(step)
        if thin and len(iterates) > 3:
            del iterates[0]
            del loglik[0]
        if step < stop.tol_step:
            converged = True
            break
    return RunResult(iterates, loglik, step_norms, k, converged)


def fixed_point(problem: EmProblem, theta0, tol: float = 1e-12, max_iter: int = 50000) -> np.ndarray:
    """Operational fixed point: the final iterate of a tight plain-EM run."""
    return run_em(problem, theta0, StopRule(tol, max_iter), thin=True).final
