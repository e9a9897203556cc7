"""Levenberg-Marquardt on manifolds with dense or sparse Jacobians."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla

log = logging.getLogger(__name__)


@dataclass
class LMSettings:
    max_iterations: int = 50
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    gradient_tol: float = 1e-10
    step_tol: float = 1e-10
    max_damping: float = 1e16


@dataclass
class LMResult:
    state: object
    status: str                 # "gradient" | "step" | "max_iterations" | "diverged"
    iterations: int
    energy_trace: list = field(default_factory=list)
    damping: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status in ("gradient", "step")


def _diagonal_blocks(A) -> np.ndarray:
    """Boundaries of the contiguous diagonal blocks of a sparse symmetric matrix."""
    coo = A.tocoo()
    reach = np.arange(A.shape[0])
    np.maximum.at(reach, coo.row, coo.col)
    reach = np.maximum.accumulate(reach)
    ends = np.flatnonzero(reach == np.arange(A.shape[0])) + 1
    return np.concatenate([[0], ends])


def _sparse_solve(A, b, tail: int):
    """Solve the damped normal equations ``A x = b`` of a structured problem.

    The leading block is factored blockwise (each feature's unknowns couple
    only among themselves) and the last ``tail`` unknowns, which couple to
    everything, are recovered from a dense Schur complement.
    """
    A = A.tocsr()
    n = A.shape[0] - tail
    lead = A[:n, :n]
    B = A[:n, n:].toarray()
    rhs = np.column_stack([b[:n], B])
    X = np.empty_like(rhs)
    bounds = _diagonal_blocks(lead)
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        blk = lead[lo:hi, lo:hi].toarray()
        X[lo:hi] = sla.cho_solve(sla.cho_factor(blk, lower=True, check_finite=False), rhs[lo:hi],
                                 check_finite=False)
    if tail == 0:
        return X[:, 0]
    S = A[n:, n:].toarray() - B.T @ X[:, 1:]
    y = sla.solve(S, b[n:] - B.T @ X[:, 0], assume_a="pos")
    return np.concatenate([X[:, 0] - X[:, 1:] @ y, y])


def _solve(H, g, lam, tail=0):
    if sp.issparse(H):
        d = H.diagonal()
        floor = max(d.max(), 1.0) * 1e-12
        A = H + sp.diags(lam * np.maximum(d, floor))
        return _sparse_solve(A, -g, tail)
    d = np.diag(H)
    floor = max(d.max(), 1.0) * 1e-12
    A = H + np.diag(lam * np.maximum(d, floor))
    return np.linalg.solve(A, -g)


def levenberg_marquardt(state, evaluate, retract, settings: LMSettings, dense_tail: int = 0) -> LMResult:
    """Minimise ``|r(state)|^2``.

    ``evaluate(state, jac)`` returns ``(r, J)`` (``J`` is None when ``jac`` is
    false); ``retract(state, dx)`` applies a tangent increment. Damping is
    Marquardt-style, ``lambda * diag(J^T J)``. Only cost-decreasing steps are
    accepted, so the returned trace is non-increasing. For sparse Jacobians
    the leading unknowns must form a banded system and ``dense_tail`` counts
    the trailing unknowns that couple to everything.
    """
    r, J = evaluate(state, True)
    cost = float(r @ r)
    trace = [cost]
    lam = settings.initial_damping
    status = "max_iterations"
    it = 0
    while it < settings.max_iterations:
        g = J.T @ r
        if np.abs(g).max(initial=0.0) <= settings.gradient_tol:
            status = "gradient"
            break
        H = J.T @ J
        it += 1
        while True:
            try:
                dx = _solve(H, g, lam, dense_tail)
            except (np.linalg.LinAlgError, ValueError):
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                candidate = retract(state, dx)
                r_new, _ = evaluate(candidate, False)
                cost_new = float(r_new @ r_new)
                if np.isfinite(cost_new) and cost_new < cost:
                    break
                if np.abs(dx).max() <= settings.step_tol:
                    # no descent left at machine precision
                    return LMResult(state, "step", it, trace, lam)
            lam *= settings.damping_up
            if lam > settings.max_damping:
                log.warning("damping overflow after %d iterations", it)
                return LMResult(state, "diverged", it, trace, lam)
        state = candidate
        cost = cost_new
        trace.append(cost)
        lam = max(lam * settings.damping_down, 1e-12)
        if np.abs(dx).max() <= settings.step_tol:
            status = "step"
            break
        r, J = evaluate(state, True)
    return LMResult(state, status, it, trace, lam)
