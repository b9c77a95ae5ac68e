"""Online optimal-transport pseudo-labelling with a linearly decaying entropy weight."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateColumn, NumericOverflow, StepOutOfRange


@dataclass(frozen=True)
class SinkhornConfig:
    n_iters: int = 3
    eps_start: float = 0.3
    eps_end: float = 0.05

    def __post_init__(self):
        if self.n_iters < 1:
            raise ValueError("n_iters must be >= 1")
        if not (self.eps_start >= self.eps_end > 0):
            raise ValueError("need eps_start >= eps_end > 0")

    def schedule(self, total_steps: int) -> "EpsSchedule":
        return EpsSchedule(self.eps_start, self.eps_end, total_steps)


@dataclass(frozen=True)
class EpsSchedule:
    eps_start: float
    eps_end: float
    total_steps: int

    def __call__(self, step: int) -> float:
        return epsilon_at(self, step)


def epsilon_at(schedule: EpsSchedule, step: int) -> float:
    """Linear interpolation from ``eps_start`` at step 0 to ``eps_end`` at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {schedule.total_steps}]")
    if schedule.total_steps == 0:
        return schedule.eps_start
    t = step / schedule.total_steps
    # Convex-combination form keeps both endpoints exact in floating point.
    return (1.0 - t) * schedule.eps_start + t * schedule.eps_end


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    top = a.max(axis=axis, keepdims=True)
    return top + np.log(np.exp(a - top).sum(axis=axis, keepdims=True))


def solve_assignment(
    similarities,
    eps: float,
    n_iters: int = 3,
    tol: Optional[float] = None,
) -> np.ndarray:
    """Entropic transport plan between ``rho`` prototypes and ``m`` points.

    ``similarities`` is the ``(rho, m)`` matrix of prototype/feature dot
    products. Each iteration rescales columns to sum ``1/m`` and then rows
    to sum ``1/rho``, so the prototype marginal is exact on return. With
    ``tol`` set, iteration stops early once the column marginal is within
    ``tol``.

    The iteration runs on log-values; the result equals
    ``diag(a) exp(S / eps) diag(b)`` for the implied scalings.
    """
    s = np.asarray(similarities, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
        raise ValueError(f"similarities must be a non-empty 2-D matrix, got {s.shape}")
    if not np.isfinite(s).all():
        raise NumericOverflow("similarity matrix contains non-finite entries")
    if eps <= 0:
        raise ValueError("eps must be positive")
    rho, m = s.shape
    log_rho, log_m = np.log(rho), np.log(m)
    log_q = s / eps
    log_q -= log_q.max()
    for _ in range(n_iters):
        log_q -= _logsumexp(log_q, 0) + log_m
        log_q -= _logsumexp(log_q, 1) + log_rho
        if tol is not None:
            col_err = np.abs(np.exp(_logsumexp(log_q, 0) + log_m) - 1.0).max() / m
            if col_err < tol:
                break
    q = np.exp(log_q)
    if not np.isfinite(q).all():
        raise NumericOverflow("assignment overflowed")
    return q


def pseudo_labels(assignment: np.ndarray) -> np.ndarray:
    """Per-point distributions over prototypes, shape ``(m, rho)``."""
    q = np.asarray(assignment, dtype=np.float64)
    col = q.sum(axis=0)
    if (col <= 0).any():
        raise DegenerateColumn(f"{int((col <= 0).sum())} points carry no assignment mass")
    return (q / col).T


def marginal_errors(q: np.ndarray) -> tuple:
    """Max absolute deviation of row sums from 1/rho and column sums from 1/m."""
    rho, m = q.shape
    return (
        float(np.abs(q.sum(axis=1) - 1.0 / rho).max()),
        float(np.abs(q.sum(axis=0) - 1.0 / m).max()),
    )
