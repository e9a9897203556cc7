"""Deformable-environment SLAM: embedded-deformation observability tools, a
time-series motion prior back-end, baselines and a Monte Carlo simulator."""

from .estimators import DeformableSLAM, EDOdometry, RigidSLAM
from .simulator import SimConfig, evaluate_rmse, simulate
from .solvers import ed_vo_solve, initialize_state, rigid_slam_solve, solve
from .timeseries import ObservationSet, SolverConfig, TrajectoryState

__version__ = "0.1.0"

__all__ = [
    "DeformableSLAM", "EDOdometry", "RigidSLAM", "SimConfig", "simulate", "evaluate_rmse", "solve",
    "rigid_slam_solve", "ed_vo_solve", "initialize_state", "ObservationSet", "SolverConfig",
    "TrajectoryState",
]
