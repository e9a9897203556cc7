import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deformslam.lie import (
    AmbiguousAxisError, exp_rotation, geodesic_angle, inverse_retraction, log_rotation,
    right_jacobian_inv, rigid_align, skew,
)

vec3 = arrays(np.float64, 3, elements=st.floats(-1e3, 1e3))
small_tangent = arrays(np.float64, 3, elements=st.floats(-1.7, 1.7)).filter(
    lambda w: np.linalg.norm(w) < np.pi - 1e-3)


def cross_oracle(v, w):
    return np.array([v[1] * w[2] - v[2] * w[1], v[2] * w[0] - v[0] * w[2], v[0] * w[1] - v[1] * w[0]])


def rodrigues_oracle(w):
    theta = np.linalg.norm(w)
    if theta == 0:
        return np.eye(3)
    k = w / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.cos(theta) * np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * np.outer(k, k)


def test_skew_zero_and_canonical():
    assert np.array_equal(skew([0, 0, 0]), np.zeros((3, 3)))
    assert np.array_equal(skew([1, 0, 0]) @ np.array([0, 1, 0]), np.array([0, 0, 1]))


@given(vec3, vec3)
def test_skew_matches_cross_product(v, w):
    S = skew(v)
    assert np.allclose(S @ w, cross_oracle(v, w), rtol=0, atol=1e-15 * max(1.0, np.abs(v).max() * np.abs(w).max()))
    assert np.array_equal(S.T, -S)


def test_skew_is_linear(rng):
    u, v = rng.normal(size=(2, 3))
    a, b = 2.0, -0.5
    assert np.array_equal(skew(a * u + b * v), a * skew(u) + b * skew(v))


def test_exp_identity_and_quarter_turn():
    assert np.array_equal(exp_rotation([0, 0, 0]), np.eye(3))
    R = exp_rotation([0, 0, np.pi / 2])
    assert np.allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    assert np.allclose(R, rodrigues_oracle(np.array([0, 0, np.pi / 2])), atol=1e-15)


@settings(max_examples=200)
@given(small_tangent)
def test_exp_log_round_trip(w):
    R = exp_rotation(w)
    assert np.abs(R.T @ R - np.eye(3)).max() <= 1e-12
    assert abs(np.linalg.det(R) - 1) <= 1e-12
    assert np.allclose(R, rodrigues_oracle(w), atol=1e-14)
    assert np.allclose(log_rotation(R), w, atol=1e-10)
    assert np.allclose(inverse_retraction(R, np.eye(3)), w, atol=1e-10)


def test_small_angle_series():
    w = np.array([3e-9, -1e-9, 2e-9])
    assert np.allclose(log_rotation(exp_rotation(w)), w, rtol=1e-6, atol=0)


def test_log_near_pi():
    w = np.array([0.0, 0.6, 0.8]) * (np.pi - 1e-7)
    assert np.allclose(log_rotation(exp_rotation(w)), w, atol=1e-8)


def test_inverse_retraction_identity_and_pi_error(rng):
    R = exp_rotation(rng.normal(size=3))
    assert np.allclose(inverse_retraction(R, R), 0, atol=1e-15)
    with pytest.raises(AmbiguousAxisError):
        inverse_retraction(np.diag([1.0, -1.0, -1.0]), np.eye(3))


def test_inverse_retraction_norm_is_geodesic_angle(rng):
    for _ in range(50):
        a = exp_rotation(rng.normal(size=3))
        b = exp_rotation(rng.normal(size=3))
        oracle = np.arccos(np.clip((np.trace(a.T @ b) - 1) / 2, -1, 1))
        assert np.isclose(np.linalg.norm(inverse_retraction(a, b)), oracle, atol=1e-9)
        assert np.isclose(geodesic_angle(a, b), oracle)


def test_right_jacobian_inverse_by_finite_differences(rng):
    for _ in range(20):
        phi = rng.normal(size=3)
        phi *= rng.uniform(0.1, 2.5) / np.linalg.norm(phi)
        R = exp_rotation(phi)
        h = 1e-6
        fd = np.column_stack([
            (log_rotation(R @ exp_rotation(h * e)) - log_rotation(R @ exp_rotation(-h * e))) / (2 * h)
            for e in np.eye(3)])
        assert np.allclose(fd, right_jacobian_inv(phi), atol=1e-7)


def test_rigid_align_recovers_transform(rng):
    R = exp_rotation(rng.normal(size=3))
    t = rng.normal(size=3)
    src = rng.normal(size=(6, 3))
    Rh, th = rigid_align(src, src @ R.T + t)
    assert np.allclose(Rh, R, atol=1e-12) and np.allclose(th, t, atol=1e-12)
