"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numpy as np


def check_vector3(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} has non-finite entries")
    return v


def check_points(P, name: str = "points", min_points: int = 1) -> np.ndarray:
    """Return ``P`` as a finite ``(n, 3)`` float array."""
    P = np.asarray(P, dtype=float)
    if P.ndim == 1 and P.shape == (3,):
        P = P[None, :]
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError(f"{name} must have shape (n, 3), got {P.shape}")
    if P.shape[0] < min_points:
        raise ValueError(f"{name} needs at least {min_points} rows, got {P.shape[0]}")
    if not np.all(np.isfinite(P)):
        raise ValueError(f"{name} has non-finite entries")
    return P


def check_rotation(R, name: str = "rotation", atol: float = 1e-9) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {R.shape}")
    if not np.all(np.isfinite(R)):
        raise ValueError(f"{name} has non-finite entries")
    if np.abs(R.T @ R - np.eye(3)).max() > atol or abs(np.linalg.det(R) - 1.0) > atol:
        raise ValueError(f"{name} is not a proper rotation")
    return R


def check_observation_array(Z, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Validate a ``(N, F, 3)`` observation tensor.

    Missing entries are NaN. If ``mask`` is given it must agree with the NaN
    pattern; otherwise it is derived from it.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 3 or Z.shape[2] != 3:
        raise ValueError(f"observations must have shape (N, F, 3), got {Z.shape}")
    present = np.all(np.isfinite(Z), axis=2)
    partial = np.any(np.isfinite(Z), axis=2) & ~present
    if partial.any():
        raise ValueError("observation entries must be fully present or fully missing")
    if mask is None:
        return Z, present
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != Z.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match observations {Z.shape[:2]}")
    if np.any(mask != present):
        raise ValueError("observation present iff mask is true")
    return Z, mask
