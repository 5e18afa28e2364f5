"""Sinkhorn-Knopp scaling of a prediction matrix onto the class-uniform polytope.

Rows end on the probability simplex, columns at equal total mass n/C, via
alternating row normalization and column scaling of Q = D P E.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

CLAMP_EPS = 1e-12
LOG_DOMAIN_THRESHOLD = 1e-30


@dataclass
class SinkhornResult:
    Q: np.ndarray
    converged: bool
    iterations: int
    violation: float
    # max constraint violation after each full row+column sweep (index 0 = before any sweep)
    violation_history: list[float] = None


def check_prediction_matrix(P: np.ndarray, tol: float = 1e-6):
    if P.ndim != 2:
        raise ValueError("prediction matrix must be 2-D")
    if np.any(P < 0):
        raise ValueError("prediction matrix has negative entries")
    row_sums = P.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > tol):
        raise ValueError("prediction matrix rows must sum to 1")


def _violation(Q: np.ndarray, col_target: float) -> float:
    row_v = np.abs(Q.sum(axis=1) - 1.0).max()
    col_v = np.abs(Q.sum(axis=0) - col_target).max() / col_target
    return max(row_v, col_v)


def sinkhorn_adjust(P: np.ndarray, max_iters: int = 100, tol: float = 1e-6) -> SinkhornResult:
    """Return Q = D P E with unit row sums and column sums n/C.

    Entries are clamped below at CLAMP_EPS before iterating; iteration moves
    to the log domain when any entry underflows toward zero. Non-convergence
    within max_iters yields a warning plus the final violation, not an error.
    """
    P = np.asarray(P, dtype=np.float64)
    n, C = P.shape
    col_target = n / C
    P = np.maximum(P, CLAMP_EPS)
    if np.any(P.sum(axis=0) == 0.0):
        raise NumericalError("all-zero column after clamping")

    if P.min() < LOG_DOMAIN_THRESHOLD:
        return _sinkhorn_log(P, max_iters, tol, col_target)

    Q = P / P.sum(axis=1, keepdims=True)
    iterations = 0
    violation = _violation(Q, col_target)
    history = [violation]
    while violation >= tol and iterations < max_iters:
        Q = Q * (col_target / Q.sum(axis=0, keepdims=True))
        Q = Q / Q.sum(axis=1, keepdims=True)
        iterations += 1
        violation = _violation(Q, col_target)
        history.append(violation)
    converged = violation < tol
    if not converged:
        warnings.warn(f"sinkhorn_adjust: not converged after {iterations} iterations (violation {violation:.3e})")
    return SinkhornResult(Q=Q, converged=converged, iterations=iterations, violation=violation, violation_history=history)


def _sinkhorn_log(P: np.ndarray, max_iters: int, tol: float, col_target: float) -> SinkhornResult:
    logP = np.log(P)
    logQ = logP - _logsumexp(logP, axis=1, keepdims=True)
    iterations = 0
    violation = _violation(np.exp(logQ), col_target)
    history = [violation]
    while violation >= tol and iterations < max_iters:
        logQ = logQ + np.log(col_target) - _logsumexp(logQ, axis=0, keepdims=True)
        logQ = logQ - _logsumexp(logQ, axis=1, keepdims=True)
        iterations += 1
        violation = _violation(np.exp(logQ), col_target)
        history.append(violation)
    converged = violation < tol
    if not converged:
        warnings.warn(f"sinkhorn_adjust: not converged after {iterations} iterations (violation {violation:.3e})")
    return SinkhornResult(Q=np.exp(logQ), converged=converged, iterations=iterations, violation=violation, violation_history=history)


def _logsumexp(a, axis, keepdims):
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)
