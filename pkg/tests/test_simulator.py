import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deformslam import simulator as sim
from deformslam.lie import log_rotation
from deformslam.timeseries import observe_model


def _rng(seed=0):
    return np.random.default_rng(seed)


# -- environment ----------------------------------------------------------------

def test_zero_amplitude_is_static():
    spec, feats = sim.generate_environment(sim.SimConfig(amplitude_scale=0.0), _rng())
    assert np.array_equal(feats, np.repeat(spec.base[:, None], feats.shape[1], axis=1))


def test_period_two_mode_repeats():
    spec = sim.DeformationSpec(_rng().normal(size=(4, 3)), _rng(1).normal(size=(4, 1, 3)),
                               np.full((4, 1), 2.0), _rng(2).uniform(0, 6, (4, 1)))
    f = spec.positions(10)
    assert np.abs(f[:, 2:] - f[:, :-2]).max() <= 1e-12


@given(st.integers(2, 12), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_single_mode_periodicity(T, seed):
    rng = _rng(seed)
    n = 3 * T
    spec = sim.DeformationSpec(rng.normal(size=(3, 3)), rng.normal(scale=10.0, size=(3, 1, 3)),
                               np.full((3, 1), float(T)), rng.uniform(0, 6, (3, 1)))
    f = spec.positions(n)
    assert np.abs(f[:, T:] - f[:, :-T]).max() <= 1e-9


def test_deformation_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        sim.DeformationSpec(np.zeros((1, 3)), np.zeros((1, 1, 3)), [[1.5]], [[0.0]])
    with pytest.raises(ValueError):
        sim.DeformationSpec(np.zeros((1, 3)), np.full((1, 1, 3), np.inf), [[4.0]], [[0.0]])
    spec, _ = sim.generate_environment(sim.SimConfig(), _rng())
    back = sim.DeformationSpec.from_dict(spec.to_dict())
    assert np.array_equal(back.positions(20), spec.positions(20))


def test_planar_environment_stays_in_plane():
    cfg = sim.SimConfig()
    R, p = sim.generate_trajectory(cfg, _rng())
    _, feats = sim.generate_environment(cfg, _rng(), R, p)
    assert np.all(feats[..., 2] == 0.0)


# -- trajectory -------------------------------------------------------------------

def test_single_step_trajectory():
    R, p = sim.generate_trajectory(sim.SimConfig(n_steps=1), _rng())
    assert np.array_equal(R[0], np.eye(3)) and np.array_equal(p[0], np.zeros(3))


@pytest.mark.parametrize("kind", ["arc", "random_walk"])
@pytest.mark.parametrize("planar", [True, False])
def test_trajectory_step_length_and_axis(kind, planar):
    cfg = sim.SimConfig(trajectory=kind, planar=planar)
    R, p = sim.generate_trajectory(cfg, _rng(3))
    assert np.linalg.norm(np.diff(p, axis=0), axis=1).max() <= cfg.max_step_length + 1e-12
    if planar:
        for Rj in R:
            w = log_rotation(Rj)
            assert np.abs(w[:2]).max() <= 1e-12
        assert np.all(p[:, 2] == 0.0)


def test_trajectory_heading_tangent_to_motion():
    R, p = sim.generate_trajectory(sim.SimConfig(), _rng(4))
    d = np.diff(p, axis=0)[10:]
    forward = R[11:, 0, :]  # first row of R is the forward axis in world coordinates
    cos = np.sum(d * forward, axis=1) / np.linalg.norm(d, axis=1)
    assert cos.min() > 0.999


# -- observation ------------------------------------------------------------------

def test_observe_full_view_and_behind():
    rng = _rng(5)
    feats = rng.normal(scale=100.0, size=(30, 3))
    _, vis = sim.observe(np.eye(3), np.zeros(3), feats, 360.0, 1.0, rng)
    assert vis.all()
    z, vis = sim.observe(np.eye(3), np.zeros(3), np.array([[-100.0, 0.0, 0.0]]), 60.0, 1.0, rng)
    assert not vis[0] and np.all(np.isnan(z[0]))


def test_observe_noiseless_identity():
    ds = sim.simulate(sim.SimConfig(noise_sigma=0.0, n_steps=20), _rng(6))
    obs, tr = ds.observations, ds.truth
    for i, j in zip(*np.nonzero(obs.mask)):
        expect = observe_model(tr.rotations[j], tr.positions[j], tr.shapes[i, j])
        assert np.abs(obs.z[i, j] - expect).max() <= 1e-12


def test_visibility_consistency():
    ds = sim.simulate(sim.SimConfig(n_steps=30), _rng(7))
    tr = ds.truth
    half = np.deg2rad(ds.fov_deg) / 2.0
    for j in range(tr.n_steps):
        for i in range(tr.shapes.shape[0]):
            d = tr.shapes[i, j] - tr.positions[j]
            fwd = tr.rotations[j][0]
            ang = np.arccos(np.clip(fwd @ d / np.linalg.norm(d), -1, 1))
            assert ds.observations.mask[i, j] == (ang <= half + 1e-12)


def test_noise_calibration():
    rng = _rng(8)
    feats = rng.uniform(100.0, 200.0, size=(4000, 3))
    R = np.eye(3)
    z, vis = sim.observe(R, np.zeros(3), feats, 360.0, 2.0, rng)
    err = z - feats
    assert err.size >= 1e4
    assert np.all(np.abs(err.std(axis=0) - 2.0) <= 0.1)


def test_simulate_determinism_and_defaults():
    a = sim.simulate(sim.SimConfig(seed=11))
    b = sim.simulate(sim.SimConfig(seed=11))
    assert a.observations.z.shape == (20, 60, 3)
    assert np.array_equal(a.observations.mask, b.observations.mask)
    assert np.array_equal(a.observations.z[a.observations.mask], b.observations.z[b.observations.mask])
    assert np.array_equal(a.truth.shapes, b.truth.shapes)
    assert 30.0 <= a.fov_deg <= 90.0 and 1.0 <= a.noise_sigma <= 5.0


def test_sim_config_validation_and_round_trip():
    cfg = sim.SimConfig(preset="lung", fov_deg=45.0)
    assert sim.SimConfig.from_dict(cfg.to_dict()) == cfg
    for bad in ({"preset": "liver"}, {"noise_sigma": -1.0}, {"fov_deg": 0.0}, {"n_steps": 0},
                {"trajectory": "zigzag"}):
        with pytest.raises(ValueError):
            sim.SimConfig(**bad)
    with pytest.raises(ValueError):
        sim.SimConfig.from_dict({"bogus": 1})


# -- metrics ----------------------------------------------------------------------

def test_evaluate_rmse_oracles(rng):
    ds = sim.simulate(sim.SimConfig(n_steps=20), rng)
    tr = ds.truth
    zero = sim.evaluate_rmse(tr, tr)
    assert all(v <= 1e-12 for v in zero.values())
    shifted = tr.copy()
    shifted.positions[:, 0] += 1.0
    m = sim.evaluate_rmse(shifted, tr)
    assert m["rmse_x"] == pytest.approx(1.0) and m["rmse_y"] == 0.0
    noisy = tr.copy()
    dp = rng.normal(size=noisy.positions.shape)
    noisy.positions += dp
    m = sim.evaluate_rmse(noisy, tr)
    assert m["rmse_y"] == pytest.approx(np.sqrt(np.mean(dp[:, 1] ** 2)), rel=1e-12)
    assert m["rmse_pos"] == pytest.approx(np.sqrt(np.mean(np.sum(dp**2, axis=1))), rel=1e-12)
    with pytest.raises(ValueError):
        short = tr.copy()
        short.positions = short.positions[:5]
        sim.evaluate_rmse(short, tr)


def test_evaluate_rmse_heading():
    ds = sim.simulate(sim.SimConfig(n_steps=10), _rng(9))
    tr = ds.truth
    est = tr.copy()
    est.rotations = np.array([sim.rot_z(0.01).T @ R for R in tr.rotations])
    m = sim.evaluate_rmse(est, tr)
    assert m["rmse_heading"] == pytest.approx(0.01, rel=1e-9)
    assert sim.evaluate_rmse(est, tr, planar=False)["rmse_heading"] == pytest.approx(0.01, rel=1e-9)


def test_fit_coefficients_recovers_single_mode():
    spec = sim.DeformationSpec(_rng().normal(size=(5, 3)), _rng(1).normal(size=(5, 1, 3)),
                               np.full((5, 1), 7.0), _rng(2).uniform(0, 6, (5, 1)))
    f = spec.positions(40)
    c = sim.fit_coefficients(f, np.ones((5, 40), dtype=bool), 3)
    w = 2 * np.pi / 7.0
    # (1 - x)(x^2 - 2 cos w x + 1) = order-3 recurrence with a unit root
    assert np.allclose(c, [1 + 2 * np.cos(w), -(1 + 2 * np.cos(w)), 1.0], atol=1e-8)
