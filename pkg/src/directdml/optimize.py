"""Smooth unconstrained minimization with a backtracking line search."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .bregman import DomainError

ValueGrad = Callable[[NDArray], tuple[float, NDArray]]
Hessian = Callable[[NDArray], NDArray]

ARMIJO_C1 = 1e-4
MIN_STEP = 1e-20
JITTER = 1e-10


class OptimizationError(RuntimeError):
    """The objective could not be evaluated at an iterate."""


@dataclass(frozen=True)
class Objective:
    """A smooth objective ``fun(beta) + ridge * ||beta||^2``.

    Parameters
    ----------
    dim : int
        Parameter count.
    fun : callable
        Returns ``(value, gradient)`` at ``beta``.
    hess : callable, optional
        Exact Hessian of ``fun``. When present the solver takes Newton steps.
    ridge : float
        Penalty weight, must be non-negative.
    """

    dim: int
    fun: ValueGrad
    hess: Optional[Hessian] = None
    ridge: float = 0.0

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("objective dimension must be positive")
        if not self.ridge >= 0.0:
            raise ValueError(f"ridge must be non-negative, got {self.ridge}")

    def value_grad(self, beta: NDArray) -> tuple[float, NDArray]:
        v, g = self.fun(beta)
        g = np.asarray(g, dtype=float)
        if self.ridge:
            v = v + self.ridge * float(beta @ beta)
            g = g + 2.0 * self.ridge * beta
        return float(v), g

    def value(self, beta: NDArray) -> float:
        return self.value_grad(beta)[0]

    def hessian(self, beta: NDArray) -> NDArray:
        if self.hess is None:
            raise ValueError("objective has no Hessian")
        H = np.asarray(self.hess(beta), dtype=float)
        if self.ridge:
            H = H + 2.0 * self.ridge * np.eye(self.dim)
        return H


@dataclass(frozen=True)
class SolveReport:
    beta_hat: NDArray
    grad_norm: float
    iterations: int
    converged: bool
    value: float
    history: tuple[float, ...] = field(default=(), repr=False)
    message: str = ""


def _safe_eval(obj: Objective, beta: NDArray) -> Optional[tuple[float, NDArray]]:
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            v, g = obj.value_grad(beta)
    except (DomainError, FloatingPointError, OverflowError):
        return None
    if not math.isfinite(v) or not np.all(np.isfinite(g)):
        return None
    return v, g


def _newton_direction(obj: Objective, beta: NDArray, g: NDArray) -> Optional[NDArray]:
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            H = obj.hessian(beta)
        if not np.all(np.isfinite(H)):
            return None
        L = np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None
    y = np.linalg.solve(L, -g)
    return np.linalg.solve(L.T, y)


def minimize(
    obj: Objective,
    beta0: Optional[NDArray] = None,
    tol: float = 1e-10,
    max_iter: Optional[int] = None,
) -> SolveReport:
    """Minimize ``obj`` from ``beta0`` until the gradient 2-norm is at most ``tol``.

    Uses Newton directions when ``obj`` has a positive definite Hessian and
    BFGS otherwise, with a steepest-descent fallback whenever a direction
    is not a descent direction. Trial points where the objective is
    undefined or non-finite shrink the step.

    Raises
    ------
    OptimizationError
        If the objective is not finite at ``beta0``.
    """
    if not tol > 0.0:
        raise ValueError("tol must be positive")
    dim = obj.dim
    if max_iter is None:
        max_iter = 10 * dim + 500
    beta = np.zeros(dim) if beta0 is None else np.array(beta0, dtype=float).ravel()
    if beta.shape[0] != dim:
        raise ValueError(f"beta0 has length {beta.shape[0]}, objective has dimension {dim}")

    first = _safe_eval(obj, beta)
    if first is None:
        raise OptimizationError(f"objective is not finite at the initial iterate {beta.tolist()}")
    f, g = first
    history = [f]
    Hinv = np.eye(dim)
    eps = np.finfo(float).eps
    it = 0
    message = "max_iter reached"
    while True:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            message = "converged"
            break
        if it >= max_iter:
            break
        direction = _newton_direction(obj, beta, g) if obj.hess is not None else None
        if direction is None:
            direction = -Hinv @ g
        slope = float(g @ direction)
        if not slope < 0.0 or not np.all(np.isfinite(direction)):
            direction = -g
            slope = -gnorm**2
            Hinv = np.eye(dim)

        t = 1.0
        accepted = None
        while t >= MIN_STEP:
            trial = beta + t * direction
            res = _safe_eval(obj, trial)
            if res is not None:
                f_new, g_new = res
                if f_new <= f + ARMIJO_C1 * t * slope:
                    accepted = (trial, f_new, g_new)
                    break
                # Decrease below rounding level: accept when the gradient still shrinks.
                if abs(f_new - f) <= 100.0 * eps * (1.0 + abs(f)) and np.linalg.norm(g_new) < gnorm:
                    accepted = (trial, f_new, g_new)
                    break
            t *= 0.5
        if accepted is None:
            if direction is not None and not np.array_equal(Hinv, np.eye(dim)):
                Hinv = np.eye(dim)
                it += 1
                continue
            message = "line search failed"
            break

        trial, f_new, g_new = accepted
        s = trial - beta
        yv = g_new - g
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            rho = 1.0 / sy
            I = np.eye(dim)
            V = I - rho * np.outer(s, yv)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
        else:
            Hinv = np.eye(dim)
        beta, f, g = trial, f_new, g_new
        history.append(f)
        it += 1

    gnorm = float(np.linalg.norm(g))
    return SolveReport(
        beta_hat=beta,
        grad_norm=gnorm,
        iterations=it,
        converged=gnorm <= tol,
        value=f,
        history=tuple(history),
        message=message,
    )


def gradient_check(obj: Objective, beta: NDArray, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central difference| / (1 + |analytic|)``."""
    beta = np.asarray(beta, dtype=float)
    _, g = obj.value_grad(beta)
    worst = 0.0
    for j in range(obj.dim):
        e = np.zeros(obj.dim)
        e[j] = h
        fd = (obj.value(beta + e) - obj.value(beta - e)) / (2.0 * h)
        worst = max(worst, abs(g[j] - fd) / (1.0 + abs(g[j])))
    return worst


def solve_normal(G: NDArray, b: NDArray, ridge: float = 0.0) -> NDArray:
    """Solve ``(G + ridge I) beta = b``, jittering the diagonal if singular."""
    p = G.shape[0]
    A = G + ridge * np.eye(p)
    if np.linalg.matrix_rank(A) < p:
        warnings.warn(
            f"normal equations are rank deficient; adding {JITTER:g} to the diagonal",
            RuntimeWarning,
            stacklevel=2,
        )
        A = A + JITTER * np.eye(p)
    return np.linalg.solve(A, b)
