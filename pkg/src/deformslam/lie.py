"""SO(3) primitives: skew operator, exponential/logarithm maps, inverse retraction.

Rotations are plain ``(3, 3)`` float arrays and tangent vectors plain ``(3,)``
arrays. Perturbations throughout the package are applied on the right,
``R <- R @ exp_rotation(delta)``.
"""

from __future__ import annotations

import numpy as np

_SMALL_ANGLE = 1e-8
_NEAR_PI = 1e-3


class AmbiguousAxisError(ValueError):
    """Raised when the logarithm is requested for a rotation of exactly pi."""


def skew(v) -> np.ndarray:
    """Return the matrix ``S`` with ``S @ w == cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` applied to the skew part of ``S``."""
    return 0.5 * np.array([S[2, 1] - S[1, 2], S[0, 2] - S[2, 0], S[1, 0] - S[0, 1]])


def exp_rotation(w) -> np.ndarray:
    """Rodrigues formula. Second-order series below ``|w| < 1e-8``."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = skew(w)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * K + b * K @ K


def log_rotation(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` with angle in ``[0, pi)``.

    Raises
    ------
    AmbiguousAxisError
        If the rotation angle is pi to machine precision, where the sign of
        the axis is undetermined.
    """
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    v = vee(R)  # = sin(theta) * axis
    if theta < _SMALL_ANGLE:
        return v * (1.0 + theta**2 / 6.0)
    if np.pi - theta > _NEAR_PI:
        return theta / np.sin(theta) * v
    # near pi the antisymmetric part vanishes; recover the axis from the
    # symmetric part and the sign from v
    sym = 0.5 * (R + R.T) - cos_theta * np.eye(3)
    sym /= 1.0 - cos_theta
    col = int(np.argmax(np.diag(sym)))
    axis = sym[:, col] / np.sqrt(sym[col, col])
    s = float(axis @ v)
    if abs(s) < 1e-12:
        raise AmbiguousAxisError("rotation angle is pi; axis sign is ambiguous")
    axis *= np.sign(s)
    # refine the angle with atan2, which is well conditioned here
    theta = np.arctan2(np.linalg.norm(v), cos_theta)
    return theta * axis


def inverse_retraction(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a (-) b``: tangent vector at ``b`` pointing to ``a``, i.e. ``log(b^T a)``."""
    return log_rotation(np.asarray(b).T @ np.asarray(a))


def geodesic_angle(a: np.ndarray, b: np.ndarray) -> float:
    c = np.clip(0.5 * (np.trace(np.asarray(a).T @ np.asarray(b)) - 1.0), -1.0, 1.0)
    return float(np.arccos(c))


def right_jacobian_inv(phi) -> np.ndarray:
    """Inverse right Jacobian of SO(3).

    ``log(exp(phi) @ exp(d)) ~= phi + right_jacobian_inv(phi) @ d`` for small d.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


def project_to_rotation(M: np.ndarray) -> np.ndarray:
    """Closest rotation to ``M`` in Frobenius norm."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def rigid_align(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares ``R, t`` minimising ``sum |R @ src_i + t - dst_i|^2``.

    ``src`` and ``dst`` are ``(n, 3)`` with ``n >= 3``.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (dst - cd).T @ (src - cs)
    R = project_to_rotation(H)
    return R, cd - R @ cs


def yaw(R: np.ndarray) -> float:
    """Heading about +z of the forward (first) column."""
    return float(np.arctan2(R[1, 0], R[0, 0]))


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator, max_angle: float = np.pi - 1e-3) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_rotation(axis * rng.uniform(0.0, max_angle))
