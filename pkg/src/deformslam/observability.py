"""Fisher-information rank analysis for the ED and time-series formulations.

Everything here turns an identifiability statement into a number: a
Jacobian is assembled (analytically or by central differences), its
Gauss-Newton information ``J^T J`` is decomposed, and the numerical rank,
null space and gauge directions are reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import ed_graph as ed
from .lie import exp_rotation, log_rotation, random_rotation, right_jacobian_inv, skew
from .timeseries import DeformableProblem, ObservationSet, SolverConfig, TrajectoryState

DEFAULT_REL_TOL = 1e-8


@dataclass
class FimReport:
    singular_values: np.ndarray
    rank: int
    nullity: int
    null_basis: np.ndarray
    tolerance_used: float
    labels: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.rank + self.nullity

    def null_support(self, index) -> float:
        """Fraction of the null space's squared norm carried by coordinates ``index``."""
        if self.nullity == 0:
            return 0.0
        return float(np.sum(self.null_basis[index] ** 2) / np.sum(self.null_basis**2))

    def to_dict(self, with_basis: bool = False) -> dict:
        out = {
            "singular_values": [float(s) for s in self.singular_values],
            "rank": int(self.rank),
            "nullity": int(self.nullity),
            "dim": int(self.dim),
            "tolerance_used": float(self.tolerance_used),
        }
        if with_basis:
            out["null_basis"] = self.null_basis.T.tolist()
        return out


def numeric_jacobian(residual_fn, state, step: float = 1e-6, retract=None, dim: int | None = None) -> np.ndarray:
    """Central-difference Jacobian of ``residual_fn`` at ``state``.

    With ``retract`` the state lives on a manifold and column ``k`` probes
    ``retract(state, +-step e_k)``; rotation blocks are then perturbed
    through the exponential map by whatever ``retract`` does. Without it
    ``state`` is a flat vector.
    """
    if retract is None:
        x0 = np.asarray(state, dtype=float).ravel()
        dim = x0.size

        def retract(x, dx):
            return x + dx
    elif dim is None:
        raise ValueError("dim is required when a retraction is given")
    r0 = np.asarray(residual_fn(state), dtype=float).ravel()
    if not np.all(np.isfinite(r0)):
        raise ValueError("residual is not finite at the expansion point")
    J = np.empty((r0.size, dim))
    for k in range(dim):
        dx = np.zeros(dim)
        dx[k] = step
        rp = np.asarray(residual_fn(retract(state, dx)), dtype=float).ravel()
        rm = np.asarray(residual_fn(retract(state, -dx)), dtype=float).ravel()
        if not (np.all(np.isfinite(rp)) and np.all(np.isfinite(rm))):
            raise ValueError(f"non-finite residual while probing coordinate {k}")
        J[:, k] = (rp - rm) / (2.0 * step)
    return J


def fim(jacobian) -> np.ndarray:
    """Gauss-Newton information ``J^T J`` (dense, exactly symmetric)."""
    J = jacobian.toarray() if sp.issparse(jacobian) else np.asarray(jacobian, dtype=float)
    if not np.all(np.isfinite(J)):
        raise ValueError("jacobian has non-finite entries")
    F = J.T @ J
    return 0.5 * (F + F.T)


def rank_analysis(F, rel_tol: float = DEFAULT_REL_TOL, equilibrate: bool = False) -> FimReport:
    """Numerical rank of a symmetric information matrix.

    Singular values above ``rel_tol * sigma_max`` count towards the rank; the
    null basis is spanned by the remaining right singular vectors.

    With ``equilibrate`` the matrix is first scaled to unit diagonal,
    ``D^-1 F D^-1`` with ``D = sqrt(diag F)``. This leaves the exact rank
    unchanged but removes spurious small singular values caused by mixing
    units (radians against millimetres). The reported singular values are
    those of the scaled matrix; the null basis is mapped back and
    orthonormalised.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise ValueError(f"information matrix must be square, got {F.shape}")
    n = F.shape[0]
    if n == 0:
        return FimReport(np.zeros(0), 0, 0, np.zeros((0, 0)), 0.0)
    d = np.ones(n)
    if equilibrate:
        d = np.sqrt(np.clip(np.diag(F), 0.0, None))
        d[d == 0.0] = 1.0
        F = F / np.outer(d, d)
    _, s, Vt = np.linalg.svd(F)
    smax = s[0] if s.size else 0.0
    tol = rel_tol * smax
    if smax == 0.0:
        return FimReport(s, 0, n, np.eye(n), 0.0)
    rank = int(np.sum(s > tol))
    null = Vt[rank:].T / d[:, None]
    if equilibrate and null.shape[1]:
        null = np.linalg.qr(null)[0]
    return FimReport(s, rank, n - rank, null.copy(), float(tol))


# ---------------------------------------------------------------------------
# ED formulation

def assemble_ed_jacobian(point, graph: ed.EdGraph, pose: ed.GlobalPose) -> np.ndarray:
    """Analytic Jacobian of one warped point, ``3 x (12 m + 6)``.

    Columns follow ``[vec(A_1..A_m) (column-major), T_1..T_m, rotation
    tangent, Tc]``. The rotation block is ``-Rc skew(Lambda M + T C)`` and
    the ``Tc`` block the identity.
    """
    P = np.asarray(point, dtype=float).reshape(1, 3)
    return ed.jacobian(P, graph, pose, ed.EdEnergyWeights(0.0, 0.0, 1.0))[:3]


def ed_full_jacobian(points, graph, pose, weights: ed.EdEnergyWeights) -> np.ndarray:
    return ed.jacobian(points, graph, pose, weights)


def ed_fim(points, graph, pose, weights: ed.EdEnergyWeights, rel_tol: float = DEFAULT_REL_TOL) -> FimReport:
    return rank_analysis(fim(ed.jacobian(points, graph, pose, weights)), rel_tol)


def gauge_directions(graph: ed.EdGraph, pose: ed.GlobalPose, eps: float = 1e-6) -> np.ndarray:
    """Tangent vectors of the six gauge families, ``(12 m + 6, 6)``.

    Columns 0-2 differentiate ``gauge_rotate(exp(e * w_i))`` and columns 3-5
    ``gauge_translate(e * e_i)``, both by central differences at ``e = 0``.
    """
    cols = []
    for i in range(3):
        w = np.zeros(3)
        w[i] = eps
        pp, gp = ed.gauge_rotate(pose, graph, exp_rotation(w))
        pm, gm = ed.gauge_rotate(pose, graph, exp_rotation(-w))
        cols.append((ed.state_difference(gp, pp, graph, pose) - ed.state_difference(gm, pm, graph, pose)) / (2 * eps))
    for i in range(3):
        d = np.zeros(3)
        d[i] = eps
        pp, gp = ed.gauge_translate(pose, graph, d)
        pm, gm = ed.gauge_translate(pose, graph, -d)
        cols.append((ed.state_difference(gp, pp, graph, pose) - ed.state_difference(gm, pm, graph, pose)) / (2 * eps))
    return np.column_stack(cols)


def direction_ratios(J: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``|J v| / (|J|_2 |v|)`` for each column ``v`` of ``V``."""
    nJ = np.linalg.norm(J, 2)
    if nJ == 0.0:
        return np.zeros(V.shape[1])
    return np.linalg.norm(J @ V, axis=0) / (nJ * np.linalg.norm(V, axis=0))


@dataclass
class GaugeReport:
    ratios: np.ndarray          # rotation x3, translation x3
    tolerance: float
    nullity: int
    residual_norm: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.ratios <= self.tolerance))

    def to_dict(self) -> dict:
        return {"ratios": [float(r) for r in self.ratios], "tolerance": self.tolerance,
                "passed": self.passed, "nullity": int(self.nullity), "residual_norm": self.residual_norm}


def verify_gauge_null_directions(points, graph, pose, targets, weights: ed.EdEnergyWeights,
                                 tol: float = 1e-8, residual_tol: float = 1e-10,
                                 rel_tol: float = DEFAULT_REL_TOL) -> GaugeReport:
    """Check that the six gauge tangents lie in the Jacobian kernel.

    Requires a zero-residual state: away from it only the translation
    directions are guaranteed to be null.
    """
    r = ed.residual_vector(points, graph, pose, targets, weights)
    rn = float(np.linalg.norm(r))
    if rn > residual_tol:
        raise ValueError(f"state is not at zero residual (|r| = {rn:.3e})")
    J = ed.jacobian(points, graph, pose, weights)
    ratios = direction_ratios(J, gauge_directions(graph, pose))
    return GaugeReport(ratios, tol, rank_analysis(fim(J), rel_tol).nullity, rn)


@dataclass
class HessianLawReport:
    h2_error: float
    h1_error: float
    h1_error_unprojected: float
    rank: int
    nullity: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.h2_error <= self.tolerance and self.h1_error <= self.tolerance

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, float) else v) for k, v in self.__dict__.items()} | {
            "passed": self.passed}


def check_hessian_law(point, graph: ed.EdGraph, pose: ed.GlobalPose, tol: float = 1e-10,
                      rel_tol: float = DEFAULT_REL_TOL) -> HessianLawReport:
    """Reproduce the ``Lambda`` and ``T`` rows of the single-point Hessian.

    ``H2`` rows of node ``j`` equal ``C_j * Rc^T H4``. ``H1`` rows of node
    ``j``, column ``q`` of ``A_j`` equal ``M_j[q] * (-(S^T)^+ H3)`` on the row
    space of ``S^T``; ``S`` is singular, so only that projection is
    checked. Errors are relative to ``max |H|``.
    """
    P = np.asarray(point, dtype=float).reshape(1, 3)
    mats = ed.build_influence_matrices(P, graph)
    J = assemble_ed_jacobian(P, graph, pose)
    H = J.T @ J
    m = graph.m
    scale = max(np.abs(H).max(), np.finfo(float).tiny)
    H1 = H[:9 * m]
    H2 = H[9 * m:12 * m]
    H3 = H[12 * m:12 * m + 3]
    H4 = H[12 * m + 3:]
    RtH4 = pose.Rc.T @ H4
    C = mats.C[:, 0]
    h2 = np.abs(H2 - np.kron(C, np.ones(3))[:, None] * np.tile(RtH4, (m, 1))).max() / scale
    S = skew(mats.deformed()[:, 0])
    St_pinv = np.linalg.pinv(S.T)
    base = -St_pinv @ H3
    proj = S.T @ St_pinv
    Mv = mats.M[:, 0].reshape(m, 3)
    h1, h1_raw = 0.0, 0.0
    for j in range(m):
        for q in range(3):
            block = H1[9 * j + 3 * q:9 * j + 3 * q + 3]
            recipe = Mv[j, q] * base
            h1 = max(h1, np.abs(proj @ (block - recipe)).max() / scale)
            h1_raw = max(h1_raw, np.abs(block - recipe).max() / scale)
    rep = rank_analysis(H, rel_tol)
    return HessianLawReport(float(h2), float(h1), float(h1_raw), rep.rank, rep.nullity, tol)


def make_ed_instance(rng: np.random.Generator, m: int = 8, n: int = 20, deform: float = 0.1,
                     consistent: bool = False):
    """Random ED problem ``(points, graph, pose, targets)``.

    With ``consistent`` the graph encodes one rigid motion and the targets
    are exact, so every energy term vanishes at the returned state.
    Otherwise node transforms are perturbed rotations and the targets carry
    unit noise.
    """
    g = rng.uniform(-50.0, 50.0, size=(m, 3))
    graph = ed.EdGraph.at_rest(g, n_neighbors=min(3, m - 1))
    points = rng.uniform(-50.0, 50.0, size=(n, 3))
    pose = ed.GlobalPose(random_rotation(rng), rng.normal(scale=20.0, size=3))
    if consistent:
        R0 = random_rotation(rng)
        d = rng.normal(scale=10.0, size=3)
        A = np.tile(R0, (m, 1, 1))
        t = g @ R0.T + d - g
    else:
        A = np.array([exp_rotation(rng.normal(scale=0.3, size=3)) + deform * rng.normal(size=(3, 3))
                      for _ in range(m)])
        t = rng.normal(scale=5.0, size=(m, 3))
    graph = graph.replace(A=A, t=t)
    targets = np.array([ed.warp_point(v, graph, pose) for v in points])
    if not consistent:
        targets = targets + rng.normal(scale=1.0, size=targets.shape)
    return points, graph, pose, targets


def ed_fixture_to_dict(points, graph, pose, targets, weights: ed.EdEnergyWeights) -> dict:
    return {"kind": "ed", "points": np.asarray(points).tolist(), "targets": np.asarray(targets).tolist(),
            "graph": ed.graph_to_dict(graph), "pose": ed.pose_to_dict(pose),
            "weights": {"w_rot": weights.w_rot, "w_reg": weights.w_reg, "w_data": weights.w_data}}


def ed_fixture_from_dict(doc: dict):
    """Inverse of :func:`ed_fixture_to_dict`: ``(points, graph, pose, targets, weights)``."""
    return (np.asarray(doc["points"], dtype=float), ed.graph_from_dict(doc["graph"]),
            ed.pose_from_dict(doc["pose"]), np.asarray(doc["targets"], dtype=float),
            ed.EdEnergyWeights(**doc["weights"]))


# ---------------------------------------------------------------------------
# three-step toy model (window 2)

@dataclass
class ToyInstance:
    """Three poses, one feature at three steps, observations and ``[d1, d2]``.

    The prior is ``f3 - d1 f2 - d2 f1`` (``d1`` weights the most recent
    position).
    """

    R: np.ndarray       # (3, 3, 3)
    p: np.ndarray       # (3, 3)
    f: np.ndarray       # (3, 3)
    z: np.ndarray       # (3, 3)
    delta: np.ndarray   # (2,)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3, 3)
        self.p = np.asarray(self.p, dtype=float).reshape(3, 3)
        self.f = np.asarray(self.f, dtype=float).reshape(3, 3)
        self.z = np.asarray(self.z, dtype=float).reshape(3, 3)
        self.delta = np.asarray(self.delta, dtype=float).reshape(2)
        for name in ("R", "p", "f", "z", "delta"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"toy instance field {name} is not finite")

    # state vector: [w1, p1, w2, p2, w3, p3, f1, f2, f3, d1, d2]
    DIM = 29

    def retract(self, dx) -> "ToyInstance":
        dx = np.asarray(dx, dtype=float)
        R = np.array([self.R[j] @ exp_rotation(dx[6 * j:6 * j + 3]) for j in range(3)])
        p = self.p + dx[:18].reshape(3, 6)[:, 3:]
        f = self.f + dx[18:27].reshape(3, 3)
        return ToyInstance(R, p, f, self.z, self.delta + dx[27:29])

    def to_dict(self) -> dict:
        return {"R": self.R.reshape(3, 9).tolist(), "p": self.p.tolist(), "f": self.f.tolist(),
                "z": self.z.tolist(), "delta": self.delta.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ToyInstance":
        return cls(np.reshape(doc["R"], (3, 3, 3)), doc["p"], doc["f"], doc["z"], doc["delta"])


def toy_objective(inst: ToyInstance, anchor_steps: int = 2, anchor_weight: float = 1.0) -> np.ndarray:
    """Stacked toy residuals.

    Rows: three observations ``R^j (f^j - p^j) - z_j``, the prior
    ``f^3 - d1 f^2 - d2 f^1``, then the rotation anchors ``log(R^j)`` and
    position anchors ``p^j`` for the first ``anchor_steps`` poses, scaled
    by ``sqrt(anchor_weight)``.
    """
    a = np.sqrt(anchor_weight)
    obs = [inst.R[j] @ (inst.f[j] - inst.p[j]) - inst.z[j] for j in range(3)]
    prior = inst.f[2] - inst.delta[0] * inst.f[1] - inst.delta[1] * inst.f[0]
    rots = [a * log_rotation(inst.R[j]) for j in range(anchor_steps)]
    pos = [a * inst.p[j] for j in range(anchor_steps)]
    return np.concatenate(obs + [prior] + rots + pos)


def toy_jacobian(inst: ToyInstance, anchor_steps: int = 2, anchor_weight: float = 1.0) -> np.ndarray:
    a = np.sqrt(anchor_weight)
    J = np.zeros((12 + 6 * anchor_steps, ToyInstance.DIM))
    for j in range(3):
        R = inst.R[j]
        rows = slice(3 * j, 3 * j + 3)
        J[rows, 6 * j:6 * j + 3] = -R @ skew(inst.f[j] - inst.p[j])
        J[rows, 6 * j + 3:6 * j + 6] = -R
        J[rows, 18 + 3 * j:21 + 3 * j] = R
    eye = np.eye(3)
    J[9:12, 24:27] = eye
    J[9:12, 21:24] = -inst.delta[0] * eye
    J[9:12, 18:21] = -inst.delta[1] * eye
    J[9:12, 27] = -inst.f[1]
    J[9:12, 28] = -inst.f[0]
    for j in range(anchor_steps):
        J[12 + 3 * j:15 + 3 * j, 6 * j:6 * j + 3] = a * right_jacobian_inv(log_rotation(inst.R[j]))
        r = 12 + 3 * anchor_steps + 3 * j
        J[r:r + 3, 6 * j + 3:6 * j + 6] = a * eye
    return J


TOY_LABELS = ([f"{n}{j}_{a}" for j in (1, 2, 3) for n in ("w", "p") for a in "xyz"]
              + [f"f{j}_{a}" for j in (1, 2, 3) for a in "xyz"] + ["d1", "d2"])


def toy_fim(inst: ToyInstance, rel_tol: float = DEFAULT_REL_TOL, anchor_steps: int = 3,
            anchor_weight: float = 1e6, equilibrate: bool = True) -> FimReport:
    """Rank report of the toy information matrix.

    All three poses are anchored by default, with the same anchor weight as
    the solver's initial-pose term. With only two anchored poses the 24
    residual rows cannot determine the 29 unknowns, whatever the feature
    does.
    """
    rep = rank_analysis(fim(toy_jacobian(inst, anchor_steps, anchor_weight)), rel_tol, equilibrate)
    rep.labels = list(TOY_LABELS)
    return rep


def make_toy_instance(rng: np.random.Generator, moving: bool = True, noise: float = 0.0) -> ToyInstance:
    """Consistent toy instance: first two poses at the anchor, third random.

    A moving feature takes random ``f1, f2`` and random ``d``, with ``f3``
    following the prior; a static one repeats ``f1`` and uses ``d1 + d2 = 1``.
    """
    R = np.stack([np.eye(3), np.eye(3), exp_rotation(rng.normal(scale=0.3, size=3))])
    p = np.stack([np.zeros(3), np.zeros(3), rng.normal(scale=20.0, size=3)])
    f1 = rng.uniform(50.0, 150.0, size=3)
    if moving:
        f2 = f1 + rng.normal(scale=20.0, size=3)
        delta = rng.uniform(-1.0, 1.0, size=2)
        delta[0] += 1.0
        f3 = delta[0] * f2 + delta[1] * f1
    else:
        f2 = f3 = f1.copy()
        d1 = rng.uniform(0.2, 0.8)
        delta = np.array([d1, 1.0 - d1])
    f = np.stack([f1, f2, f3])
    z = np.einsum("jab,jb->ja", R, f - p) + noise * rng.normal(size=(3, 3))
    return ToyInstance(R, p, f, z, delta)


# ---------------------------------------------------------------------------
# time-series formulation

def timeseries_jacobian(obs: ObservationSet, state: TrajectoryState, config: SolverConfig,
                        coeff_reg: float = 0.0) -> np.ndarray:
    problem = DeformableProblem(obs, config, coeff_reg=coeff_reg)
    _, J = problem.evaluate(state, True)
    return J.toarray()


def timeseries_fim(obs: ObservationSet, state: TrajectoryState, config: SolverConfig | None = None,
                   rel_tol: float = DEFAULT_REL_TOL, coeff_reg: float = 0.0,
                   equilibrate: bool = True) -> tuple[FimReport, slice]:
    """Rank report of the full time-series information matrix.

    The coefficient regulariser is left out by default so that the report
    shows what the data alone determine. Returns the report and the slice of
    the coefficient coordinates (empty when ``c`` is fixed).
    """
    config = config or SolverConfig()
    problem = DeformableProblem(obs, config, coeff_reg=coeff_reg)
    _, J = problem.evaluate(state, True)
    rep = rank_analysis(fim(J.toarray()), rel_tol, equilibrate)
    return rep, slice(problem.coeff_base, problem.n_params)


def coefficient_solutions(shapes: np.ndarray, valid: np.ndarray, t: int, tol: float = 1e-10):
    """All coefficient vectors with zero prior residual on the given histories.

    Returns a particular solution and a basis of the affine family's
    directions (empty when ``c`` is unique). Raises ``ValueError`` when no
    exact solution exists.
    """
    from .timeseries import prior_windows

    win = prior_windows(valid, t)
    if len(win) == 0:
        raise ValueError("no complete prior window")
    i, j = win[:, 0], win[:, 1]
    A = np.stack([shapes[i, j - k].ravel() for k in range(1, t + 1)], axis=1)
    b = shapes[i, j].ravel()
    c, *_ = np.linalg.lstsq(A, b, rcond=None)
    if np.linalg.norm(A @ c - b) > tol * max(1.0, np.linalg.norm(b)):
        raise ValueError("histories do not satisfy any linear prior of this window")
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    rank = int(np.sum(s > tol * s[0])) if s.size else 0
    return c, Vt[rank:].T
