"""scikit-learn style wrappers around the three trajectory solvers.

A single observation tensor is one "sample" here, so ``fit`` estimates the
trajectory of that dataset and ``predict`` returns the fitted robot
positions. ``score`` takes the ground-truth :class:`TrajectoryState` as
``y`` and returns the negative position RMSE (higher is better).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import ed_graph as ed
from .simulator import evaluate_rmse
from .solvers import ed_vo_solve, rigid_slam_solve, solve
from .timeseries import ObservationSet, SolverConfig, TrajectoryState


def as_observations(X) -> ObservationSet:
    """Accept an :class:`ObservationSet` or an ``(N, F, 3)`` array with NaN gaps."""
    if isinstance(X, ObservationSet):
        return X
    return ObservationSet(np.asarray(X, dtype=float))


class _TrajectoryEstimator(BaseEstimator):
    def _solver_config(self) -> SolverConfig:
        return SolverConfig(window=self.window, max_iterations=self.max_iterations, w_obs=self.w_obs,
                            w_f=getattr(self, "w_f", 1.0), w_ini=self.w_ini,
                            coeff_reg=getattr(self, "coeff_reg", 1e-8),
                            fix_coefficients=getattr(self, "fix_coefficients", False))

    def _store(self, obs, state, report):
        self.trajectory_ = state
        self.report_ = report
        self.rotations_ = state.rotations
        self.positions_ = state.positions
        self.n_features_in_ = obs.n_features
        self.n_steps_ = obs.n_steps
        return self

    def predict(self, X=None) -> np.ndarray:
        """Fitted robot positions ``(F, 3)``.

        ``X`` is accepted for API symmetry; it must have the fitted shape.
        """
        check_is_fitted(self, "trajectory_")
        if X is not None:
            obs = as_observations(X)
            if (obs.n_features, obs.n_steps) != (self.n_features_in_, self.n_steps_):
                raise ValueError("predict only reports the fitted dataset; call fit on new data")
        return self.positions_.copy()

    def score(self, X, y: TrajectoryState) -> float:
        self.predict(X)
        return -evaluate_rmse(self.trajectory_, y)["rmse_pos"]


class DeformableSLAM(_TrajectoryEstimator):
    """Time-series-prior deformable SLAM.

    Parameters
    ----------
    window : int
        Number of past positions in the linear feature-motion prior.
    w_obs, w_f, w_ini : float
        Weights of the observation, prior and initial-pose terms.
    coeff_reg : float
        Ridge weight on the prior coefficients.
    fix_coefficients : bool
        Keep the coefficients at their initial value.
    init : {"rigid", "odometry"}
        Starting point: the rigid back-end solution or chained odometry.
    """

    def __init__(self, window=5, w_obs=1.0, w_f=1.0, w_ini=1e6, coeff_reg=1e-8, max_iterations=50,
                 fix_coefficients=False, init="rigid"):
        self.window = window
        self.w_obs = w_obs
        self.w_f = w_f
        self.w_ini = w_ini
        self.coeff_reg = coeff_reg
        self.max_iterations = max_iterations
        self.fix_coefficients = fix_coefficients
        self.init = init

    def fit(self, X, y=None):
        if self.init not in ("rigid", "odometry"):
            raise ValueError(f"init must be 'rigid' or 'odometry', got {self.init!r}")
        obs = as_observations(X)
        cfg = self._solver_config()
        start = rigid_slam_solve(obs, cfg)[0] if self.init == "rigid" else None
        state, report = solve(obs, cfg, init=start)
        self.coeffs_ = state.coeffs
        self.shapes_ = state.shapes
        return self._store(obs, state, report)


class RigidSLAM(_TrajectoryEstimator):
    """Classical least-squares back-end with one static position per feature."""

    def __init__(self, window=5, w_obs=1.0, w_ini=1e6, max_iterations=50):
        self.window = window
        self.w_obs = w_obs
        self.w_ini = w_ini
        self.max_iterations = max_iterations

    def fit(self, X, y=None):
        obs = as_observations(X)
        state, report = rigid_slam_solve(obs, self._solver_config())
        self.features_ = state.shapes[:, 0]
        return self._store(obs, state, report)


class EDOdometry(_TrajectoryEstimator):
    """Pairwise embedded-deformation registration chained into a trajectory."""

    def __init__(self, w_rot=100.0, w_reg=1.0, w_data=1.0, n_nodes=8, max_iterations=10):
        self.w_rot = w_rot
        self.w_reg = w_reg
        self.w_data = w_data
        self.n_nodes = n_nodes
        self.max_iterations = max_iterations

    def fit(self, X, y=None):
        obs = as_observations(X)
        weights = ed.EdEnergyWeights(self.w_rot, self.w_reg, self.w_data)
        state, report = ed_vo_solve(obs, weights, SolverConfig(), self.n_nodes, self.max_iterations)
        return self._store(obs, state, report)
