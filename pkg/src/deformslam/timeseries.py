"""Time-series-prior deformable SLAM model: state, energy terms and Jacobians.

Each feature ``i`` has its own position ``f_i^j`` at every step ``j`` where
it is observed. A single coefficient vector ``c = [d_1 .. d_t]`` links a
position to the ``t`` previous ones::

    f_i^{n+1} = d_1 f_i^n + d_2 f_i^{n-1} + ... + d_t f_i^{n+1-t}

The objective is ``E_obs + E_f + E_ini`` with observations
``z = R^j (f - p^j)``. Steps are 0-based here; the robot frame's first axis
is its viewing direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .lie import exp_rotation, log_rotation, right_jacobian_inv
from .validation import check_observation_array


class UnsolvableInstanceError(ValueError):
    """The dataset cannot constrain the requested model."""


class InitializationGapError(UnsolvableInstanceError):
    """Two consecutive steps share fewer than three observed features."""


@dataclass
class ObservationSet:
    """Observations ``z[i, j]`` of feature ``i`` at step ``j`` (NaN when absent)."""

    z: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.z, self.mask = check_observation_array(self.z, self.mask)

    @property
    def n_features(self) -> int:
        return self.z.shape[0]

    @property
    def n_steps(self) -> int:
        return self.z.shape[1]

    @classmethod
    def from_records(cls, n_features: int, n_steps: int, records) -> "ObservationSet":
        z = np.full((n_features, n_steps, 3), np.nan)
        for rec in records:
            i, j = int(rec["feature"]), int(rec["step"])
            if not np.all(np.isnan(z[i, j])):
                raise ValueError(f"duplicate observation for feature {i} at step {j}")
            z[i, j] = rec["z"]
        return cls(z)

    def to_records(self) -> list:
        out = []
        for j in range(self.n_steps):
            for i in np.flatnonzero(self.mask[:, j]):
                out.append({"step": int(j), "feature": int(i), "z": self.z[i, j].tolist()})
        return out


@dataclass
class ShapeMatrix:
    """The ``3N x F`` feature-history matrix with its validity mask."""

    B: np.ndarray
    valid: np.ndarray

    @classmethod
    def from_shapes(cls, shapes: np.ndarray, valid: np.ndarray) -> "ShapeMatrix":
        N, F, _ = shapes.shape
        B = np.where(valid[:, :, None], shapes, np.nan).transpose(0, 2, 1).reshape(3 * N, F)
        return cls(B, valid.copy())

    def shapes(self) -> np.ndarray:
        N = self.valid.shape[0]
        return self.B.reshape(N, 3, -1).transpose(0, 2, 1)

    def windows(self, t: int) -> np.ndarray:
        return prior_windows(self.valid, t)


@dataclass
class TrajectoryState:
    rotations: np.ndarray   # (F, 3, 3)
    positions: np.ndarray   # (F, 3)
    shapes: np.ndarray      # (N, F, 3); entries outside ``valid`` are ignored
    valid: np.ndarray       # (N, F)
    coeffs: np.ndarray      # (t,)

    def copy(self) -> "TrajectoryState":
        return TrajectoryState(self.rotations.copy(), self.positions.copy(), self.shapes.copy(),
                               self.valid.copy(), self.coeffs.copy())

    @property
    def n_steps(self) -> int:
        return len(self.positions)

    @property
    def shape_matrix(self) -> ShapeMatrix:
        return ShapeMatrix.from_shapes(self.shapes, self.valid)


@dataclass
class SolverConfig:
    max_iterations: int = 50
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    gradient_tol: float = 1e-10
    step_tol: float = 1e-10
    window: int = 5
    coeff_reg: float = 1e-8
    w_obs: float = 1.0
    w_f: float = 1.0
    w_ini: float = 1e6
    fix_coefficients: bool = False
    anchor_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    anchor_position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        for name in ("initial_damping", "damping_up", "gradient_tol", "step_tol"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.damping_down < 1 < self.damping_up:
            raise ValueError("need 0 < damping_down < 1 < damping_up")
        if min(self.coeff_reg, self.w_obs, self.w_f, self.w_ini) < 0:
            raise ValueError("weights must be non-negative")
        self.anchor_rotation = np.asarray(self.anchor_rotation, dtype=float)
        self.anchor_position = np.asarray(self.anchor_position, dtype=float)

    def lm_settings(self):
        from .lm import LMSettings

        return LMSettings(self.max_iterations, self.initial_damping, self.damping_up,
                          self.damping_down, self.gradient_tol, self.step_tol)

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["anchor_rotation"] = self.anchor_rotation.ravel().tolist()
        out["anchor_position"] = self.anchor_position.tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SolverConfig":
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown solver option(s): {sorted(unknown)}")
        if "anchor_rotation" in doc:
            doc["anchor_rotation"] = np.reshape(doc["anchor_rotation"], (3, 3))
        return cls(**doc)


def static_coefficients(t: int) -> np.ndarray:
    c = np.zeros(t)
    c[0] = 1.0
    return c


def observe_model(R, p, f) -> np.ndarray:
    """Feature position seen from the robot: ``R (f - p)``."""
    return np.asarray(R) @ (np.asarray(f, dtype=float) - np.asarray(p, dtype=float))


def predict_feature(history, c) -> np.ndarray:
    """Next position from a chronological history ``[f^{n+1-t}, ..., f^n]``.

    ``c[0]`` multiplies the most recent entry.
    """
    history = np.asarray(history, dtype=float).reshape(-1, 3)
    c = np.asarray(c, dtype=float)
    if len(history) != len(c):
        raise ValueError(f"history length {len(history)} != window {len(c)}")
    return c @ history[::-1]


def prior_windows(valid: np.ndarray, t: int) -> np.ndarray:
    """``(i, j)`` pairs whose target step ``j`` and ``t`` predecessors are all observed."""
    valid = np.asarray(valid, dtype=bool)
    N, F = valid.shape
    if F <= t:
        return np.zeros((0, 2), dtype=int)
    ok = np.ones((N, F - t), dtype=bool)
    for k in range(t + 1):
        ok &= valid[:, k:F - t + k]
    i, j = np.nonzero(ok)
    return np.column_stack([i, j + t]).astype(int)


def e_obs(state: TrajectoryState, obs: ObservationSet):
    i, j = np.nonzero(obs.mask)
    R = state.rotations[j]
    pred = np.einsum("eab,eb->ea", R, state.shapes[i, j] - state.positions[j])
    res = pred - obs.z[i, j]
    return float(np.sum(res**2)), res


def e_f(state: TrajectoryState, t: int | None = None):
    t = len(state.coeffs) if t is None else t
    win = prior_windows(state.valid, t)
    if len(win) == 0:
        return 0.0, np.zeros((0, 3))
    i, j = win[:, 0], win[:, 1]
    res = state.shapes[i, j].copy()
    for k in range(1, t + 1):
        res -= state.coeffs[k - 1] * state.shapes[i, j - k]
    return float(np.sum(res**2)), res


def e_ini(state: TrajectoryState, t: int, anchor_rotation=None, anchor_position=None):
    R0 = np.eye(3) if anchor_rotation is None else np.asarray(anchor_rotation)
    p0 = np.zeros(3) if anchor_position is None else np.asarray(anchor_position)
    t = min(t, state.n_steps)
    res = np.concatenate([
        state.positions[:t] - p0,
        np.array([log_rotation(R0.T @ state.rotations[j]) for j in range(t)]).reshape(-1, 3),
    ])
    return float(np.sum(res**2)), res


# ---------------------------------------------------------------------------
# least-squares problems

@dataclass
class RigidState:
    rotations: np.ndarray
    positions: np.ndarray
    features: np.ndarray    # (N, 3)


def _skew_batch(v: np.ndarray) -> np.ndarray:
    """``skew`` applied to every row of an ``(E, 3)`` array."""
    S = np.zeros((len(v), 3, 3))
    S[:, 0, 1], S[:, 0, 2], S[:, 1, 2] = -v[:, 2], v[:, 1], -v[:, 0]
    return S - S.transpose(0, 2, 1)


def _block_triplets(row0, col0, blocks):
    """COO triplets for a batch of 3x3 (or 3x1) blocks at (row0[e], col0[e])."""
    E, h, w = blocks.shape
    rr = (row0[:, None, None] + np.arange(h)[None, :, None]).repeat(w, axis=2)
    cc = (col0[:, None, None] + np.arange(w)[None, None, :]).repeat(h, axis=1)
    return rr.ravel(), cc.ravel(), blocks.ravel()


class _Problem:
    """Shared pose/anchor machinery for the deformable and rigid problems."""

    def __init__(self, obs: ObservationSet, config: SolverConfig):
        self.obs = obs
        self.config = config
        self.F = obs.n_steps
        self.t = config.window
        self.ei, self.ej = np.nonzero(obs.mask)
        self.zs = obs.z[self.ei, self.ej]
        self.n_anchor = min(self.t, self.F)

    def _pose_terms(self, rotations, positions, feat_pos, feat_col, row, jac):
        """Observation and anchor residuals plus their Jacobian triplets."""
        cfg = self.config
        so, sa = np.sqrt(cfg.w_obs), np.sqrt(cfg.w_ini)
        R = rotations[self.ej]
        d = feat_pos - positions[self.ej]
        r_obs = so * (np.einsum("eab,eb->ea", R, d) - self.zs)
        A = self.n_anchor
        R0, p0 = cfg.anchor_rotation, cfg.anchor_position
        phis = np.array([log_rotation(R0.T @ rotations[j]) for j in range(A)]).reshape(-1, 3)
        r_ini = sa * np.concatenate([positions[:A] - p0, phis])
        res = [r_obs.ravel(), r_ini.ravel()]
        trip = []
        if jac:
            E = len(self.ej)
            pb = self.pose_base
            rows = row + 3 * np.arange(E)
            S = _skew_batch(d)
            trip.append(_block_triplets(rows, pb + 6 * self.ej, -so * R @ S))
            trip.append(_block_triplets(rows, pb + 6 * self.ej + 3, -so * R))
            trip.append(_block_triplets(rows, feat_col, so * R))
            r0 = row + 3 * E
            steps = np.arange(A)
            eye = np.broadcast_to(sa * np.eye(3), (A, 3, 3))
            trip.append(_block_triplets(r0 + 3 * steps, pb + 6 * steps + 3, eye))
            jr = np.array([sa * right_jacobian_inv(phi) for phi in phis]).reshape(A, 3, 3)
            trip.append(_block_triplets(r0 + 3 * A + 3 * steps, pb + 6 * steps, jr))
        return res, trip

    @staticmethod
    def _assemble(res, trip, n_rows, n_cols, jac):
        r = np.concatenate(res)
        if not jac:
            return r, None
        rr = np.concatenate([t[0] for t in trip])
        cc = np.concatenate([t[1] for t in trip])
        vv = np.concatenate([t[2] for t in trip])
        J = sp.csr_matrix((vv, (rr, cc)), shape=(n_rows, n_cols))
        return r, J

    def _retract_poses(self, rotations, positions, dx):
        dpose = dx[self.pose_base:self.pose_base + 6 * self.F].reshape(self.F, 6)
        rot = np.array([R @ exp_rotation(w) for R, w in zip(rotations, dpose[:, :3])])
        return rot, positions + dpose[:, 3:]


class DeformableProblem(_Problem):
    """Unknowns: poses, every observed ``f_i^j`` and (unless fixed) ``c``."""

    def __init__(self, obs: ObservationSet, config: SolverConfig, coeff_reg: float | None = None):
        super().__init__(obs, config)
        self.coeff_reg = config.coeff_reg if coeff_reg is None else coeff_reg
        self.shape_index = -np.ones(obs.mask.shape, dtype=int)
        self.shape_index[self.ei, self.ej] = np.arange(len(self.ei))
        # feature positions first (banded per feature), then poses and c
        self.shape_base = 0
        self.n_shape = len(self.ei)
        self.pose_base = 3 * self.n_shape
        self.coeff_base = self.pose_base + 6 * self.F
        self.free_coeffs = not config.fix_coefficients
        self.n_params = self.coeff_base + (self.t if self.free_coeffs else 0)
        self.dense_tail = self.n_params - self.pose_base
        self.windows = prior_windows(obs.mask, self.t)

    def shape_col(self, i, j):
        return self.shape_base + 3 * self.shape_index[i, j]

    def evaluate(self, state: TrajectoryState, jac: bool = True):
        cfg = self.config
        t = self.t
        feat = state.shapes[self.ei, self.ej]
        res, trip = self._pose_terms(state.rotations, state.positions, feat,
                                     self.shape_col(self.ei, self.ej), 0, jac)
        row = 3 * len(self.ei) + 6 * self.n_anchor
        sf = np.sqrt(cfg.w_f)
        W = len(self.windows)
        c = state.coeffs
        if W:
            wi, wj = self.windows[:, 0], self.windows[:, 1]
            r_f = state.shapes[wi, wj].copy()
            for k in range(1, t + 1):
                r_f -= c[k - 1] * state.shapes[wi, wj - k]
            res.append(sf * r_f.ravel())
            if jac:
                rows = row + 3 * np.arange(W)
                eye = np.eye(3)
                trip.append(_block_triplets(rows, self.shape_col(wi, wj), np.broadcast_to(sf * eye, (W, 3, 3))))
                for k in range(1, t + 1):
                    trip.append(_block_triplets(rows, self.shape_col(wi, wj - k),
                                                np.broadcast_to(-sf * c[k - 1] * eye, (W, 3, 3))))
                    if self.free_coeffs:
                        blk = -sf * state.shapes[wi, wj - k][:, :, None]
                        trip.append(_block_triplets(rows, np.full(W, self.coeff_base + k - 1), blk))
        row += 3 * W
        if self.free_coeffs:
            sc = np.sqrt(self.coeff_reg)
            res.append(sc * c)
            if jac:
                idx = np.arange(t)
                trip.append((row + idx, self.coeff_base + idx, np.full(t, sc)))
            row += t
        return self._assemble(res, trip, row, self.n_params, jac)

    def retract(self, state: TrajectoryState, dx) -> TrajectoryState:
        rot, pos = self._retract_poses(state.rotations, state.positions, dx)
        shapes = state.shapes.copy()
        shapes[self.ei, self.ej] += dx[:self.pose_base].reshape(-1, 3)
        coeffs = state.coeffs + dx[self.coeff_base:] if self.free_coeffs else state.coeffs.copy()
        return TrajectoryState(rot, pos, shapes, state.valid, coeffs)

    def energies(self, state: TrajectoryState) -> dict:
        cfg = self.config
        eo, _ = e_obs(state, self.obs)
        ef, _ = e_f(state, self.t)
        ei, _ = e_ini(state, self.t, cfg.anchor_rotation, cfg.anchor_position)
        out = {"e_obs": eo, "e_f": ef, "e_ini": ei,
               "e_reg": float(self.coeff_reg * state.coeffs @ state.coeffs) if self.free_coeffs else 0.0}
        out["energy"] = cfg.w_obs * eo + cfg.w_f * ef + cfg.w_ini * ei
        return out


class RigidProblem(_Problem):
    """Unknowns: poses and one static position per feature."""

    def __init__(self, obs: ObservationSet, config: SolverConfig):
        super().__init__(obs, config)
        self.feat_base = 0
        self.pose_base = 3 * obs.n_features
        self.n_params = self.pose_base + 6 * self.F
        self.dense_tail = 6 * self.F

    def evaluate(self, state: RigidState, jac: bool = True):
        res, trip = self._pose_terms(state.rotations, state.positions, state.features[self.ei],
                                     self.feat_base + 3 * self.ei, 0, jac)
        row = 3 * len(self.ei) + 6 * self.n_anchor
        return self._assemble(res, trip, row, self.n_params, jac)

    def retract(self, state: RigidState, dx) -> RigidState:
        rot, pos = self._retract_poses(state.rotations, state.positions, dx)
        return RigidState(rot, pos, state.features + dx[:self.pose_base].reshape(-1, 3))

    def energies(self, state: RigidState) -> dict:
        ts = self.to_trajectory(state)
        cfg = self.config
        eo, _ = e_obs(ts, self.obs)
        ei, _ = e_ini(ts, self.t, cfg.anchor_rotation, cfg.anchor_position)
        return {"e_obs": eo, "e_f": 0.0, "e_ini": ei, "e_reg": 0.0,
                "energy": cfg.w_obs * eo + cfg.w_ini * ei}

    def to_trajectory(self, state: RigidState) -> TrajectoryState:
        shapes = np.repeat(state.features[:, None, :], self.F, axis=1)
        return TrajectoryState(state.rotations.copy(), state.positions.copy(), shapes,
                               self.obs.mask.copy(), static_coefficients(self.t))
