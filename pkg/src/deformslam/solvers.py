"""Solvers: time-series deformable SLAM, rigid SLAM and ED-node visual odometry."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import ed_graph as ed
from .lie import exp_rotation, rigid_align
from .lm import LMSettings, levenberg_marquardt
from .timeseries import (
    DeformableProblem,
    InitializationGapError,
    ObservationSet,
    RigidProblem,
    RigidState,
    SolverConfig,
    TrajectoryState,
    UnsolvableInstanceError,
    prior_windows,
    static_coefficients,
)

log = logging.getLogger(__name__)

DEFAULT_ED_WEIGHTS = ed.EdEnergyWeights(w_rot=100.0, w_reg=1.0, w_data=1.0)


@dataclass
class SolveReport:
    method: str
    status: str
    iterations: int
    energy_trace: list = field(default_factory=list)
    energies: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status in ("gradient", "step", "max_iterations")

    @property
    def final_energy(self) -> float:
        return float(self.energies.get("energy", self.energy_trace[-1] if self.energy_trace else np.nan))

    def to_dict(self) -> dict:
        return {"method": self.method, "status": self.status, "iterations": self.iterations,
                "energy_trace": [float(e) for e in self.energy_trace],
                "energies": {k: float(v) for k, v in self.energies.items()}}


def _check_observed(obs: ObservationSet):
    if not obs.mask.any():
        raise UnsolvableInstanceError("dataset has no observations")


def initialize_state(obs: ObservationSet, config: SolverConfig) -> TrajectoryState:
    """Chain closed-form rigid alignments between consecutive steps.

    Step 0 sits at the configured anchor. Features seen at step ``j-1`` are
    placed in the world with the pose of ``j-1`` and the pose of ``j`` is the
    rigid fit of those points onto the step-``j`` observations.
    """
    _check_observed(obs)
    F = obs.n_steps
    R = np.empty((F, 3, 3))
    p = np.empty((F, 3))
    R[0] = config.anchor_rotation
    p[0] = config.anchor_position
    for j in range(1, F):
        common = obs.mask[:, j - 1] & obs.mask[:, j]
        if common.sum() < 3:
            raise InitializationGapError(
                f"steps {j - 1} and {j} share {int(common.sum())} features; need 3")
        world = obs.z[common, j - 1] @ R[j - 1] + p[j - 1]
        Rj, tj = rigid_align(world, obs.z[common, j])
        R[j] = Rj
        p[j] = -Rj.T @ tj
    shapes = np.einsum("jba,ijb->ija", R, np.nan_to_num(obs.z)) + p[None]
    shapes[~obs.mask] = 0.0
    return TrajectoryState(R, p, shapes, obs.mask.copy(), static_coefficients(config.window))


def _run(problem, state, config: SolverConfig):
    settings = config.lm_settings()
    return levenberg_marquardt(state, problem.evaluate, problem.retract, settings, problem.dense_tail)


def solve(obs: ObservationSet, config: SolverConfig | None = None,
          init: TrajectoryState | None = None) -> tuple[TrajectoryState, SolveReport]:
    """Minimise ``E_obs + E_f + E_ini`` over poses, feature histories and ``c``."""
    config = config or SolverConfig()
    _check_observed(obs)
    if obs.n_steps < config.window + 1:
        raise UnsolvableInstanceError(f"need more than {config.window} steps, got {obs.n_steps}")
    if len(prior_windows(obs.mask, config.window)) == 0:
        raise UnsolvableInstanceError("no feature is observed over a full prior window")
    t0 = time.perf_counter()
    if init is None:
        init = initialize_state(obs, config)
    else:
        init = init.copy()
        init.valid = obs.mask.copy()
    problem = DeformableProblem(obs, config)
    res = _run(problem, init, config)
    if res.status == "diverged":
        log.warning("deformable solve diverged; returning last accepted state")
    report = SolveReport("deformable", res.status, res.iterations, res.energy_trace,
                         problem.energies(res.state), time.perf_counter() - t0)
    return res.state, report


def rigid_slam_solve(obs: ObservationSet, config: SolverConfig | None = None,
                     init: TrajectoryState | None = None) -> tuple[TrajectoryState, SolveReport]:
    """Classical back-end: one static position per feature."""
    config = config or SolverConfig()
    _check_observed(obs)
    t0 = time.perf_counter()
    if init is None:
        init = initialize_state(obs, config)
    counts = np.maximum(obs.mask.sum(axis=1), 1)
    feats = (init.shapes * obs.mask[:, :, None]).sum(axis=1) / counts[:, None]
    problem = RigidProblem(obs, config)
    res = _run(problem, RigidState(init.rotations.copy(), init.positions.copy(), feats), config)
    report = SolveReport("rigid", res.status, res.iterations, res.energy_trace,
                         problem.energies(res.state), time.perf_counter() - t0)
    return problem.to_trajectory(res.state), report


# ---------------------------------------------------------------------------
# ED-node visual odometry

def farthest_point_sample(points: np.ndarray, m: int) -> np.ndarray:
    """Indices of ``m`` well-spread points, starting from the one nearest the centroid."""
    points = np.asarray(points, dtype=float)
    first = int(np.argmin(np.linalg.norm(points - points.mean(axis=0), axis=1)))
    chosen = [first]
    d = np.linalg.norm(points - points[first], axis=1)
    for _ in range(1, min(m, len(points))):
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return np.array(chosen)


def build_graph(points: np.ndarray, n_nodes: int = 8, n_neighbors: int = 4) -> ed.EdGraph:
    """At-rest ED graph on a subsample of ``points``."""
    idx = farthest_point_sample(points, n_nodes)
    m = len(idx)
    if m < 2:
        raise ed.DegenerateGraphError("need at least two distinct points for a graph")
    return ed.EdGraph.at_rest(points[idx], k_influence=min(4, m - 1), n_neighbors=n_neighbors)


@dataclass
class EdRegistration:
    graph: ed.EdGraph
    pose: ed.GlobalPose
    status: str
    iterations: int
    energy_trace: list


def ed_register(src, dst, weights: ed.EdEnergyWeights = DEFAULT_ED_WEIGHTS, n_nodes: int = 8,
                settings: LMSettings | None = None, graph: ed.EdGraph | None = None,
                pose: ed.GlobalPose | None = None) -> EdRegistration:
    """Fit an ED deformation plus global pose taking ``src`` onto ``dst``.

    Starts from the rigid alignment with the graph at rest unless ``graph``
    and ``pose`` are given.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if graph is None:
        graph = build_graph(src, n_nodes)
    if pose is None:
        R, t = rigid_align(src, dst)
        pose = ed.GlobalPose(R, t)
    mats = ed.build_influence_matrices(src, graph)
    settings = settings or LMSettings(max_iterations=30)

    def evaluate(state, jac):
        g, p = state
        r = ed.residual_vector(src, g, p, dst, weights, mats)
        return r, (ed.jacobian(src, g, p, weights, mats) if jac else None)

    def retract(state, dx):
        return ed.retract(state[0], state[1], dx)

    res = levenberg_marquardt((graph, pose), evaluate, retract, settings)
    return EdRegistration(res.state[0], res.state[1], res.status, res.iterations, res.energy_trace)


def ed_vo_solve(obs: ObservationSet, weights: ed.EdEnergyWeights = DEFAULT_ED_WEIGHTS,
                config: SolverConfig | None = None, n_nodes: int = 8, max_iterations: int = 10):
    """Chain per-pair ED registrations into a trajectory.

    ``max_iterations`` bounds each pairwise registration; the pairs start
    from a rigid fit so a few iterations suffice.

    Returns a :class:`TrajectoryState` whose shapes are the observations
    placed with the estimated poses, and a :class:`SolveReport` whose trace
    holds the final registration energy of every pair.
    """
    config = config or SolverConfig()
    _check_observed(obs)
    t0 = time.perf_counter()
    F = obs.n_steps
    R = np.empty((F, 3, 3))
    p = np.empty((F, 3))
    R[0] = config.anchor_rotation
    p[0] = config.anchor_position
    trace, iters, statuses = [], 0, set()
    settings = LMSettings(max_iterations=max_iterations, gradient_tol=1e-8, step_tol=1e-10)
    for j in range(1, F):
        common = obs.mask[:, j - 1] & obs.mask[:, j]
        if common.sum() < 3:
            raise InitializationGapError(
                f"steps {j - 1} and {j} share {int(common.sum())} features; need 3")
        reg = ed_register(obs.z[common, j - 1], obs.z[common, j], weights, n_nodes, settings)
        R[j] = reg.pose.Rc @ R[j - 1]
        p[j] = p[j - 1] - R[j].T @ reg.pose.Tc
        trace.append(reg.energy_trace[-1])
        iters += reg.iterations
        statuses.add(reg.status)
    shapes = np.einsum("jba,ijb->ija", R, np.nan_to_num(obs.z)) + p[None]
    shapes[~obs.mask] = 0.0
    state = TrajectoryState(R, p, shapes, obs.mask.copy(), static_coefficients(config.window))
    status = "diverged" if "diverged" in statuses else "ok"
    report = SolveReport("ed_vo", status, iters, trace, {"energy": float(np.sum(trace))},
                         time.perf_counter() - t0)
    return state, report


def perturb_state(state: TrajectoryState, rng: np.random.Generator, rot_scale=0.01, pos_scale=1.0):
    """Random perturbation of poses and shapes (used by tests and diagnostics)."""
    out = state.copy()
    out.rotations = np.array([R @ exp_rotation(rng.normal(scale=rot_scale, size=3)) for R in out.rotations])
    out.positions = out.positions + rng.normal(scale=pos_scale, size=out.positions.shape)
    out.shapes = out.shapes + rng.normal(scale=pos_scale, size=out.shapes.shape) * out.valid[:, :, None]
    return out


SOLVERS = {"deformable": solve, "rigid": rigid_slam_solve}

__all__ = [
    "SolveReport", "initialize_state", "solve", "rigid_slam_solve", "ed_vo_solve", "ed_register",
    "build_graph", "farthest_point_sample", "perturb_state", "InitializationGapError",
    "UnsolvableInstanceError",
]
