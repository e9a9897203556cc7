"""Synthetic deforming environments, robot paths and limited-FOV observations.

Features move as a base position plus a sum of sinusoids whose periods are
shared by the whole environment (each feature has its own amplitude and
phase). A shared set of ``K`` periods makes every trajectory satisfy one
linear recurrence of order ``2K + 1``, which is what the time-series prior
can represent exactly.

The organ presets are parameter bundles standing in for real organ motion;
they are surrogates, not measured data.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .lie import exp_rotation, geodesic_angle, rot_z, yaw
from .timeseries import ObservationSet, TrajectoryState, prior_windows

log = logging.getLogger(__name__)

# period range (steps), amplitude range (mm), number of modes
PRESETS = {
    "generic": {"period_range": (6.0, 14.0), "amplitude_range": (20.0, 60.0), "n_modes": 1},
    "heart": {"period_range": (3.0, 6.0), "amplitude_range": (2.0, 5.0), "n_modes": 2},
    "stomach": {"period_range": (12.0, 24.0), "amplitude_range": (4.0, 10.0), "n_modes": 2},
    "lung": {"period_range": (8.0, 14.0), "amplitude_range": (5.0, 12.0), "n_modes": 1},
}


@dataclass
class SimConfig:
    workspace: tuple = (500.0, 500.0)
    n_features: int = 20
    n_steps: int = 60
    fov_range_deg: tuple = (30.0, 90.0)     # full viewing angle, sampled per run
    fov_deg: float | None = None            # fixes the viewing angle when set
    noise_range: tuple = (1.0, 5.0)
    noise_sigma: float | None = None
    seed: int = 0
    planar: bool = True
    preset: str = "generic"
    trajectory: str = "arc"                 # "arc" | "random_walk"
    hold_steps: int = 5
    step_length_range: tuple = (2.0, 4.0)
    max_step_length: float = 4.0
    feature_range: tuple = (150.0, 400.0)
    min_covisible: int = 6
    max_attempts: int = 200
    window: int = 5
    amplitude_scale: float = 1.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if self.trajectory not in ("arc", "random_walk"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")
        if self.n_steps < 1 or self.n_features < 1:
            raise ValueError("n_steps and n_features must be positive")
        lo, hi = self.fov_range_deg
        if not 0.0 < lo <= hi < 360.0:
            raise ValueError("fov_range_deg must satisfy 0 < lo <= hi < 360")
        if self.fov_deg is not None and not 0.0 < self.fov_deg <= 360.0:
            raise ValueError("fov_deg must lie in (0, 360]")
        if self.noise_sigma is not None and self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if min(self.noise_range) < 0 or self.amplitude_scale < 0:
            raise ValueError("noise and amplitude scales must be >= 0")
        if self.max_step_length < self.step_length_range[1]:
            raise ValueError("step_length_range exceeds max_step_length")
        self.workspace = tuple(float(v) for v in self.workspace)
        self.fov_range_deg = tuple(float(v) for v in self.fov_range_deg)
        self.noise_range = tuple(float(v) for v in self.noise_range)
        self.step_length_range = tuple(float(v) for v in self.step_length_range)
        self.feature_range = tuple(float(v) for v in self.feature_range)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "SimConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown simulation option(s): {sorted(unknown)}")
        return cls(**doc)

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


@dataclass
class DeformationSpec:
    """``f_i(j) = base_i + sum_k amplitude[i, k] * sin(2 pi j / period[i, k] + phase[i, k])``."""

    base: np.ndarray        # (N, 3)
    amplitude: np.ndarray   # (N, K, 3)
    period: np.ndarray      # (N, K)
    phase: np.ndarray       # (N, K)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=float)
        N = len(self.base)
        self.amplitude = np.asarray(self.amplitude, dtype=float).reshape(N, -1, 3)
        K = self.amplitude.shape[1]
        self.period = np.asarray(self.period, dtype=float).reshape(N, K)
        self.phase = np.asarray(self.phase, dtype=float).reshape(N, K)
        if np.any(self.period < 2.0):
            raise ValueError("periods must be at least 2 steps")
        if not np.all(np.isfinite(self.amplitude)):
            raise ValueError("amplitudes must be finite")

    def positions(self, n_steps: int) -> np.ndarray:
        """Feature positions, ``(N, n_steps, 3)``."""
        j = np.arange(n_steps)
        arg = 2.0 * np.pi * j[None, None, :] / self.period[:, :, None] + self.phase[:, :, None]
        s = np.sin(arg)  # (N, K, F)
        return self.base[:, None, :] + np.einsum("nkf,nkc->nfc", s, self.amplitude)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("base", "amplitude", "period", "phase")}

    @classmethod
    def from_dict(cls, doc: dict) -> "DeformationSpec":
        return cls(**{k: np.asarray(doc[k], dtype=float) for k in ("base", "amplitude", "period", "phase")})


@dataclass
class SimulatedDataset:
    truth: TrajectoryState
    observations: ObservationSet
    config: SimConfig
    fov_deg: float
    noise_sigma: float
    deformation: DeformationSpec = None
    extra: dict = field(default_factory=dict)


def generate_trajectory(config: SimConfig, rng: np.random.Generator):
    """Robot poses ``(R, p)``: a hold at the origin, then a smooth path.

    The robot looks along its first axis. The default path is a circular arc
    with heading tangent to the motion.
    """
    F = config.n_steps
    R = np.tile(np.eye(3), (F, 1, 1))
    p = np.zeros((F, 3))
    hold = min(config.hold_steps, F)
    moving = F - hold
    step = rng.uniform(*config.step_length_range)
    if config.trajectory == "arc":
        turn = rng.uniform(0.2, 0.6) * rng.choice([-1.0, 1.0])   # total heading change (rad)
        rates = np.full(moving, turn / max(moving, 1))
    else:
        rates = rng.normal(scale=0.02, size=moving)
    climb = 0.0 if config.planar else rng.uniform(-0.15, 0.15)
    heading = 0.0
    for n in range(moving):
        j = hold + n
        heading += rates[n]
        # planar displacement of length ``step`` (capped by max_step_length)
        d = np.array([np.cos(heading), np.sin(heading), climb])
        d *= min(step, config.max_step_length) / np.linalg.norm(d)
        p[j] = p[j - 1] + d
        if config.planar:
            R[j] = rot_z(heading).T
        else:
            pitch = np.arctan2(-d[2], np.hypot(d[0], d[1]))
            R[j] = (rot_z(heading) @ exp_rotation([0.0, pitch, 0.0])).T
    return R, p


def _forward_and_angle(R, p, f):
    """Angle between each robot's forward axis and the feature direction."""
    d = f - p
    local = np.einsum("...ab,...b->...a", R, d)
    norm = np.linalg.norm(local, axis=-1)
    cosang = np.clip(local[..., 0] / np.where(norm > 0, norm, 1.0), -1.0, 1.0)
    return np.arccos(cosang)


def visibility(R, p, features, fov_deg: float) -> np.ndarray:
    """``(N, F)`` mask: the feature lies within half the viewing angle of the forward axis."""
    ang = _forward_and_angle(R[None], p[None], features)
    return ang <= np.deg2rad(fov_deg) / 2.0 + 1e-12


def generate_environment(config: SimConfig, rng: np.random.Generator, R=None, p=None):
    """Draw a :class:`DeformationSpec` and realise it over ``n_steps``.

    Feature bases are scattered inside the viewing cone of randomly chosen
    trajectory poses when a path is given; otherwise uniformly in the
    workspace.
    """
    pre = PRESETS[config.preset]
    N, K = config.n_features, pre["n_modes"]
    fov = np.deg2rad(config.fov_deg if config.fov_deg is not None else np.mean(config.fov_range_deg))
    if R is None:
        wx, wy = config.workspace
        base = np.column_stack([rng.uniform(0, wx, N), rng.uniform(-wy / 2, wy / 2, N), np.zeros(N)])
    else:
        steps = rng.integers(0, len(p), size=N)
        # keep away from the cone edge so deformation does not flicker visibility
        half = min(0.7 * fov / 2.0, np.pi / 2.0 - 1e-3)
        az = rng.uniform(-half, half, size=N)
        el = np.zeros(N) if config.planar else rng.uniform(-half, half, size=N) * 0.5
        rng_ = rng.uniform(*config.feature_range, size=N)
        local = np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]) * rng_[:, None]
        base = np.einsum("nba,nb->na", R[steps], local) + p[steps]
    if not config.planar and R is None:
        base[:, 2] = rng.uniform(-50.0, 50.0, N)
    periods = rng.uniform(*pre["period_range"], size=K)
    period = np.tile(periods, (N, 1))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(N, K))
    mag = rng.uniform(*pre["amplitude_range"], size=(N, K)) * config.amplitude_scale
    direction = rng.normal(size=(N, K, 3))
    if config.planar:
        direction[..., 2] = 0.0
    direction /= np.linalg.norm(direction, axis=2, keepdims=True)
    spec = DeformationSpec(base, direction * mag[..., None], period, phase)
    return spec, spec.positions(config.n_steps)


def observe(R, p, features, fov_deg: float, sigma: float, rng: np.random.Generator):
    """Noisy observations ``R (f - p) + noise`` of visible features (NaN otherwise).

    ``R``, ``p`` are one pose (``(3, 3)``, ``(3,)``) or a stack of ``F`` poses
    with ``features`` shaped ``(N, F, 3)``.
    """
    R = np.asarray(R, dtype=float)
    p = np.asarray(p, dtype=float)
    features = np.asarray(features, dtype=float)
    single = R.ndim == 2
    if single:
        R, p, features = R[None], p[None], features[:, None, :]
    vis = visibility(R, p, features, fov_deg)
    z = np.einsum("fab,nfb->nfa", R, features - p[None])
    z = z + sigma * rng.standard_normal(z.shape)
    z[~vis] = np.nan
    return (z[:, 0], vis[:, 0]) if single else (z, vis)


def fit_coefficients(shapes: np.ndarray, valid: np.ndarray, t: int) -> np.ndarray:
    """Least-squares ``c`` for the prior on the given feature histories."""
    win = prior_windows(valid, t)
    if len(win) == 0:
        return np.r_[1.0, np.zeros(t - 1)]
    i, j = win[:, 0], win[:, 1]
    A = np.stack([shapes[i, j - k].ravel() for k in range(1, t + 1)], axis=1)
    b = shapes[i, j].ravel()
    c, *_ = np.linalg.lstsq(A, b, rcond=None)
    return c


def _coverage_ok(vis: np.ndarray, need: int, window: int) -> bool:
    if vis.shape[1] < 2:
        return True
    co = (vis[:, :-1] & vis[:, 1:]).sum(axis=0)
    if co.min() < need:
        return False
    return len(prior_windows(vis, window)) > 0


def simulate(config: SimConfig | None = None, rng: np.random.Generator | None = None) -> SimulatedDataset:
    """One Monte Carlo draw: viewing angle, noise level, path, environment, observations."""
    config = config or SimConfig()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    fov = config.fov_deg if config.fov_deg is not None else float(rng.uniform(*config.fov_range_deg))
    sigma = config.noise_sigma if config.noise_sigma is not None else float(rng.uniform(*config.noise_range))
    R, p = generate_trajectory(config, rng)
    cfg_env = replace(config, fov_deg=fov)
    for attempt in range(config.max_attempts):
        spec, feats = generate_environment(cfg_env, rng, R, p)
        vis = visibility(R, p, feats, fov)
        if _coverage_ok(vis, min(config.min_covisible, config.n_features), config.window):
            break
    else:
        log.warning("coverage target not met after %d attempts", config.max_attempts)
    z, vis = observe(R, p, feats, fov, sigma, rng)
    valid = np.ones((config.n_features, config.n_steps), dtype=bool)
    c_true = fit_coefficients(feats, valid, config.window)
    truth = TrajectoryState(R, p, feats, valid, c_true)
    return SimulatedDataset(truth, ObservationSet(z, vis), config, fov, sigma, spec,
                            {"attempts": attempt + 1})


def periodic_dataset(rng: np.random.Generator, period: int = 2, window: int = 4, n_steps: int = 20,
                     n_features: int = 8, fov_deg: float = 120.0, sigma: float = 0.0) -> SimulatedDataset:
    """Single-mode deformation with an integer period, seen along the default arc.

    Features sit ahead of the robot so that all of them stay visible. The
    ground-truth coefficients are the one-hot vector at lag ``period``.
    """
    if not 2 <= period <= window:
        raise ValueError("need 2 <= period <= window")
    config = SimConfig(n_steps=n_steps, n_features=n_features, fov_deg=fov_deg, noise_sigma=sigma,
                       window=window)
    R, p = generate_trajectory(config, rng)
    N = n_features
    base = np.column_stack([rng.uniform(150.0, 300.0, N), rng.uniform(-60.0, 60.0, N), np.zeros(N)])
    amp = rng.normal(scale=10.0, size=(N, 1, 3))
    amp[..., 2] = 0.0
    spec = DeformationSpec(base, amp, np.full((N, 1), float(period)), rng.uniform(0.5, 1.0, (N, 1)))
    feats = spec.positions(n_steps)
    z, vis = observe(R, p, feats, fov_deg, sigma, rng)
    c = np.zeros(window)
    c[period - 1] = 1.0
    truth = TrajectoryState(R, p, feats, np.ones((N, n_steps), dtype=bool), c)
    return SimulatedDataset(truth, ObservationSet(z, vis), config, fov_deg, sigma, spec)


def evaluate_rmse(estimate: TrajectoryState, truth: TrajectoryState, planar: bool = True) -> dict:
    """Position, heading and feature RMSE of an estimate against ground truth.

    Heading error is the rotation about +z of ``R_true^T R_est`` in planar
    mode, the full geodesic angle otherwise. Feature RMSE covers the entries
    the estimate holds (its ``valid`` mask).
    """
    if estimate.n_steps != truth.n_steps:
        raise ValueError(f"estimate has {estimate.n_steps} steps, truth {truth.n_steps}")
    dp = estimate.positions - truth.positions
    out = {
        "rmse_x": float(np.sqrt(np.mean(dp[:, 0] ** 2))),
        "rmse_y": float(np.sqrt(np.mean(dp[:, 1] ** 2))),
        "rmse_z": float(np.sqrt(np.mean(dp[:, 2] ** 2))),
        "rmse_pos": float(np.sqrt(np.mean(np.sum(dp**2, axis=1)))),
    }
    # world-from-robot rotations are R^T; compare those
    if planar:
        err = np.array([yaw(Rt @ Re.T) for Rt, Re in zip(truth.rotations, estimate.rotations)])
    else:
        err = np.array([geodesic_angle(Rt, Re) for Rt, Re in zip(truth.rotations, estimate.rotations)])
    out["rmse_heading"] = float(np.sqrt(np.mean(err**2)))
    valid = estimate.valid
    if valid.any():
        df = estimate.shapes[valid] - truth.shapes[valid]
        out["feature_rmse"] = float(np.sqrt(np.mean(np.sum(df**2, axis=1))))
    else:
        out["feature_rmse"] = float("nan")
    return out
