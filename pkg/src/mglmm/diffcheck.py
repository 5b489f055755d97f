"""Differentiation contract for the inner and outer objectives.

Derivatives in this package are hand-coded analytic expressions.  This module
wraps objectives behind a small protocol, provides the central-difference
oracle used to check them, and forms observed-information matrices.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, runtime_checkable

import numpy as np

from .families import DEFAULT_TRUNCATION, CmpTruncation
from .laplace import LaplaceObjective, subject_Q_derivatives
from .model import SubjectBlock, Theta

FD_REL_STEP = 1e-5
HESS_REL_STEP = 1e-4


class NonFiniteError(FloatingPointError):
    """Objective value or derivative is not finite at the requested point."""


@runtime_checkable
class DiffObjective(Protocol):
    def evaluate(self, x: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class FunctionObjective:
    """Objective from plain callables; ``hess`` is optional."""

    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]]
    hess: Callable[[np.ndarray], np.ndarray] | None = None

    def evaluate(self, x):
        v, g = self.value_and_grad(np.asarray(x, dtype=float))
        return float(v), np.asarray(g, dtype=float)

    def evaluate_with_hessian(self, x):
        if self.hess is None:
            raise AttributeError("no analytic Hessian")
        v, g = self.evaluate(x)
        return v, g, np.asarray(self.hess(np.asarray(x, dtype=float)), dtype=float)


class InnerObjective:
    """``-Q(b)`` for one subject, with exact gradient and Hessian in ``b``."""

    def __init__(self, subject: SubjectBlock, theta: Theta, trunc: CmpTruncation = DEFAULT_TRUNCATION):
        self.subject = subject
        self.theta = theta
        self.trunc = trunc

    def evaluate(self, b):
        q, g, _ = subject_Q_derivatives(b, self.subject, self.theta, self.trunc)
        return -q, -g

    def evaluate_with_hessian(self, b):
        q, g, h = subject_Q_derivatives(b, self.subject, self.theta, self.trunc)
        return -q, -g, -h


class OuterObjective:
    """Negative Laplace log-likelihood in the free parameters."""

    def __init__(self, objective: LaplaceObjective):
        self.objective = objective

    def evaluate(self, x):
        return self.objective.value_and_grad(np.asarray(x, dtype=float))


def _checked(value, grad):
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("objective or gradient is not finite")
    return value, grad


def gradient(objective: DiffObjective, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _, g = _checked(*objective.evaluate(x))
    if g.shape != x.shape:
        raise ValueError("gradient length differs from input length")
    return g


def _steps(x: np.ndarray, rel: float) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(x))


def hessian(objective: DiffObjective, x, rel_step: float = HESS_REL_STEP) -> np.ndarray:
    """Exact Hessian when the objective offers one, else central differences
    of the exact gradient, symmetrized."""
    x = np.asarray(x, dtype=float)
    if hasattr(objective, "evaluate_with_hessian"):
        try:
            _, _, H = objective.evaluate_with_hessian(x)
        except AttributeError:
            H = None
        if H is not None:
            if not np.all(np.isfinite(H)):
                raise NonFiniteError("Hessian is not finite")
            return 0.5 * (H + H.T)
    n = x.size
    h = _steps(x, rel_step)
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h[i]
        gp = gradient(objective, x + e)
        gm = gradient(objective, x - e)
        H[:, i] = (gp - gm) / (2.0 * h[i])
    return 0.5 * (H + H.T)


def central_difference(f: Callable[[np.ndarray], float], x, rel_step: float = FD_REL_STEP) -> np.ndarray:
    """Central-difference gradient oracle with step ``rel_step * max(1, |x_i|)``."""
    x = np.asarray(x, dtype=float)
    h = _steps(x, rel_step)
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h[i]
        out[i] = (f(x + e) - f(x - e)) / (2.0 * h[i])
    return out


def relative_error(value: np.ndarray, reference: np.ndarray) -> float:
    """Sup-norm error scaled by the sup-norm of the reference."""
    value = np.asarray(value, dtype=float)
    reference = np.asarray(reference, dtype=float)
    scale = max(float(np.max(np.abs(reference), initial=0.0)), np.finfo(float).tiny)
    return float(np.max(np.abs(value - reference), initial=0.0)) / scale


@dataclass(frozen=True)
class GradientCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: float
    passed: bool


def check_gradient(objective: DiffObjective, x, tol: float = 1e-6, rel_step: float = FD_REL_STEP) -> GradientCheck:
    g = gradient(objective, x)
    fd = central_difference(lambda z: objective.evaluate(z)[0], x, rel_step)
    err = relative_error(g, fd)
    return GradientCheck(g, fd, err, err < tol)
