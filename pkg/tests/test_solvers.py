import numpy as np
import pytest

from deformslam import ed_graph as ed
from deformslam import solvers as sv
from deformslam.lie import exp_rotation
from deformslam.simulator import SimConfig, periodic_dataset, simulate
from deformslam.timeseries import (InitializationGapError, ObservationSet, SolverConfig, TrajectoryState,
                                   UnsolvableInstanceError, static_coefficients)


def _dataset(seed, **kw):
    kw.setdefault("n_steps", 30)
    return simulate(SimConfig(**kw), np.random.default_rng(seed))


def _static_dataset(seed, sigma=0.0, n_steps=20):
    return _dataset(seed, amplitude_scale=0.0, noise_sigma=sigma, n_steps=n_steps)


def _truth_state(ds):
    tr = ds.truth.copy()
    tr.valid = ds.observations.mask.copy()
    return tr


def _period_two(rng):
    ds = periodic_dataset(rng)
    truth = ds.truth.copy()
    truth.valid = ds.observations.mask.copy()
    return ds.observations, truth


# -- initialisation -------------------------------------------------------------

def test_initialize_rigid_noiseless_is_exact():
    ds = _static_dataset(3)
    st = sv.initialize_state(ds.observations, SolverConfig())
    assert np.abs(st.positions - ds.truth.positions).max() <= 1e-8
    assert np.abs(st.rotations - ds.truth.rotations).max() <= 1e-10
    assert np.array_equal(st.coeffs, static_coefficients(5))


def test_initialize_gap_error():
    ds = _static_dataset(4)
    z = ds.observations.z.copy()
    z[:, 10] = np.nan
    with pytest.raises(InitializationGapError):
        sv.initialize_state(ObservationSet(z), SolverConfig())


def test_initialization_improved_by_solver_in_deforming_world():
    ds = _dataset(5, noise_sigma=0.0)
    cfg = SolverConfig()
    init = sv.initialize_state(ds.observations, cfg)
    from deformslam.timeseries import DeformableProblem
    e0 = DeformableProblem(ds.observations, cfg).energies(init)["energy"]
    assert np.isfinite(e0) and e0 > 0
    _, rep = sv.solve(ds.observations, cfg, init=init)
    assert rep.final_energy < e0


# -- deformable solver ------------------------------------------------------------

def test_solve_from_truth_noiseless():
    ds = _dataset(1, noise_sigma=0.0)
    _, rep = sv.solve(ds.observations, SolverConfig(), init=_truth_state(ds))
    assert rep.iterations <= 2 and rep.final_energy <= 1e-16


def test_energy_trace_monotone():
    ds = _dataset(2, noise_sigma=2.0)
    _, rep = sv.solve(ds.observations, SolverConfig(max_iterations=15))
    tr = np.asarray(rep.energy_trace)
    assert np.all(np.diff(tr) <= 1e-12 * tr[:-1])


def test_period_two_features_recovered_despite_ambiguous_c():
    rng = np.random.default_rng(7)
    obs, truth = _period_two(rng)
    init = sv.perturb_state(truth, rng)
    st, _ = sv.solve(obs, SolverConfig(window=4), init=init)
    assert np.abs(st.shapes[obs.mask] - truth.shapes[obs.mask]).max() <= 1e-6


def test_solution_independent_of_equivalent_coefficients():
    rng = np.random.default_rng(8)
    obs, truth = _period_two(rng)
    init = sv.perturb_state(truth, rng)
    out = []
    for c in ([0.0, 1.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.5]):
        init.coeffs = np.array(c)
        st, _ = sv.solve(obs, SolverConfig(window=4, fix_coefficients=True), init=init)
        out.append(st.shapes[obs.mask])
    assert np.abs(out[0] - out[1]).max() <= 1e-8


def test_unsolvable_instances():
    ds = _dataset(0, n_steps=12)
    with pytest.raises(UnsolvableInstanceError):
        sv.solve(ObservationSet(np.full((3, 10, 3), np.nan)))
    with pytest.raises(UnsolvableInstanceError):
        sv.solve(ds.observations, SolverConfig(window=12))


# -- rigid baseline and nesting ------------------------------------------------------

def test_rigid_matches_deformable_on_static_world():
    ds = _static_dataset(9)
    rs, _ = sv.rigid_slam_solve(ds.observations)
    ds_, _ = sv.solve(ds.observations, init=rs)
    assert np.abs(rs.positions - ds_.positions).max() <= 1e-8
    assert np.abs(rs.positions - ds.truth.positions).max() <= 1e-6


def test_rigid_anchor_fixes_first_pose():
    ds = _static_dataset(10, sigma=1.0)
    rs, _ = sv.rigid_slam_solve(ds.observations)
    assert np.abs(rs.positions[0]).max() <= 1e-3
    # the 1e6 anchor weight is a prior with 1e-3 std in both mm and rad
    assert np.abs(rs.rotations[0] - np.eye(3)).max() <= 3e-3


def test_rigid_has_higher_obs_energy_when_deforming():
    ds = _dataset(10, noise_sigma=1.0)
    rs, rr = sv.rigid_slam_solve(ds.observations)
    _, dr = sv.solve(ds.observations, init=rs)
    assert dr.energies["e_obs"] < rr.energies["e_obs"]
    # nesting: starting from the rigid optimum never ends higher
    assert dr.final_energy <= rr.final_energy + 1e-9


def test_deformable_beats_rigid_on_noisy_data():
    ds = _dataset(11, noise_sigma=1.0, n_steps=40)
    from deformslam.simulator import evaluate_rmse
    rs, _ = sv.rigid_slam_solve(ds.observations)
    st, _ = sv.solve(ds.observations, init=rs)
    assert evaluate_rmse(st, ds.truth)["rmse_pos"] < evaluate_rmse(rs, ds.truth)["rmse_pos"]


# -- ED odometry ---------------------------------------------------------------------

def test_ed_vo_on_rigid_world_matches_rigid_odometry():
    ds = _static_dataset(12, n_steps=12)
    st, rep = sv.ed_vo_solve(ds.observations, ed.EdEnergyWeights(w_rot=100.0, w_reg=1.0, w_data=1.0))
    init = sv.initialize_state(ds.observations, SolverConfig())
    assert len(st.positions) == 12
    assert np.abs(st.positions - init.positions).max() <= 1e-6
    assert np.abs(st.positions - ds.truth.positions).max() <= 1e-6


def test_ed_register_gauge_sensitivity(rng):
    src = rng.uniform(-50, 50, size=(15, 3))
    dst = src + rng.normal(scale=2.0, size=src.shape)
    reg = sv.ed_register(src, dst)
    V0 = exp_rotation([0.0, 0.0, 0.3])
    pose2, graph2 = ed.gauge_rotate(reg.pose, reg.graph, V0)
    mats = ed.build_influence_matrices(src, reg.graph)
    e1 = ed.total_energy(src, reg.graph, reg.pose, dst, sv.DEFAULT_ED_WEIGHTS, mats)
    e2 = ed.total_energy(src, graph2, pose2, dst, sv.DEFAULT_ED_WEIGHTS, mats)
    assert e2 == pytest.approx(e1, rel=1e-9, abs=1e-9)
    assert np.abs(pose2.Rc - reg.pose.Rc).max() > 0.1


def test_ed_vo_worse_than_slam_when_deforming():
    ds = _dataset(13)
    from deformslam.simulator import evaluate_rmse
    ev, _ = sv.ed_vo_solve(ds.observations)
    rs, _ = sv.rigid_slam_solve(ds.observations)
    assert evaluate_rmse(ev, ds.truth)["rmse_pos"] > evaluate_rmse(rs, ds.truth)["rmse_pos"]
