"""Embedded-deformation (ED) graph: warp, energy terms, matrix form and gauge maps.

A graph holds ``m`` nodes with positions ``g_j``, affine matrices ``A_j`` and
translations ``t_j``. A point ``v`` is deformed by its ``k`` nearest nodes::

    warp(v) = Rc @ sum_j w_j(v) [A_j (v - g_j) + g_j + t_j] + Tc

In matrix form the deformed cloud is ``Rc [Lambda M + T C] + Tc (x) 1`` where
``Lambda = [A_1 ... A_m]`` (3 x 3m), ``T = [t_1 + g_1 ... t_m + g_m]`` (3 x m)
and ``M`` (3m x n), ``C`` (m x n) hold the point-to-node weights.

Energy parameter vectors used by the Jacobians are ordered
``[vec(A_1) .. vec(A_m), T_1 .. T_m, omega, Tc]`` with column-major ``vec``
and ``omega`` a right perturbation of ``Rc``. Lengths are in millimetres.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import exp_rotation, log_rotation, skew


class DegenerateGraphError(ValueError):
    """Node layout cannot produce valid interpolation weights for a point."""


@dataclass
class EdNode:
    g: np.ndarray
    A: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class EdGraph:
    """Node parameters plus symmetric neighbour topology.

    ``alpha`` maps a directed edge ``(j, k)`` to its regularisation weight;
    edges missing from it weigh 1.
    """

    g: np.ndarray
    A: np.ndarray
    t: np.ndarray
    neighbors: list
    alpha: dict = field(default_factory=dict)
    k_influence: int = 4

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float).reshape(-1, 3)
        m = len(self.g)
        self.A = np.asarray(self.A, dtype=float).reshape(m, 3, 3)
        self.t = np.asarray(self.t, dtype=float).reshape(m, 3)
        self.neighbors = [tuple(int(k) for k in nb) for nb in self.neighbors]
        if len(self.neighbors) != m:
            raise ValueError("one neighbour set per node required")
        for j, nb in enumerate(self.neighbors):
            for k in nb:
                if k == j or not 0 <= k < m:
                    raise ValueError(f"invalid neighbour {k} for node {j}")
                if j not in self.neighbors[k]:
                    raise ValueError(f"neighbour relation not symmetric at ({j}, {k})")
        for edge, a in self.alpha.items():
            if a <= 0:
                raise ValueError(f"alpha must be positive, edge {edge} has {a}")
        if not np.all(np.isfinite(self.g)) or not np.all(np.isfinite(self.A)) \
                or not np.all(np.isfinite(self.t)):
            raise ValueError("node parameters must be finite")

    @classmethod
    def from_nodes(cls, nodes, neighbors, alpha=None, k_influence=4):
        return cls(
            g=np.array([n.g for n in nodes]),
            A=np.array([n.A for n in nodes]),
            t=np.array([n.t for n in nodes]),
            neighbors=neighbors,
            alpha=dict(alpha or {}),
            k_influence=k_influence,
        )

    @classmethod
    def at_rest(cls, g, neighbors=None, k_influence=4, n_neighbors=4):
        """Identity-deformation graph on node positions ``g``.

        Without explicit ``neighbors`` each node is linked to its
        ``n_neighbors`` nearest nodes, symmetrised.
        """
        g = np.asarray(g, dtype=float).reshape(-1, 3)
        if neighbors is None:
            neighbors = knn_topology(g, n_neighbors)
        m = len(g)
        return cls(g=g, A=np.tile(np.eye(3), (m, 1, 1)), t=np.zeros((m, 3)),
                   neighbors=neighbors, k_influence=k_influence)

    @property
    def m(self) -> int:
        return len(self.g)

    @property
    def nodes(self) -> list:
        return [EdNode(self.g[j].copy(), self.A[j].copy(), self.t[j].copy()) for j in range(self.m)]

    @property
    def T(self) -> np.ndarray:
        """Per-node ``t_j + g_j`` as an ``(m, 3)`` array."""
        return self.t + self.g

    def edges(self):
        """Directed edges ``(j, k, alpha_jk)`` in storage order."""
        for j, nb in enumerate(self.neighbors):
            for k in nb:
                yield j, k, self.alpha.get((j, k), 1.0)

    def replace(self, A=None, t=None) -> "EdGraph":
        return EdGraph(
            g=self.g.copy(),
            A=self.A.copy() if A is None else A,
            t=self.t.copy() if t is None else t,
            neighbors=list(self.neighbors),
            alpha=dict(self.alpha),
            k_influence=self.k_influence,
        )

    def copy(self) -> "EdGraph":
        return self.replace()


@dataclass
class GlobalPose:
    Rc: np.ndarray = field(default_factory=lambda: np.eye(3))
    Tc: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.Rc = np.asarray(self.Rc, dtype=float)
        self.Tc = np.asarray(self.Tc, dtype=float)

    def copy(self) -> "GlobalPose":
        return GlobalPose(self.Rc.copy(), self.Tc.copy())


@dataclass(frozen=True)
class EdEnergyWeights:
    w_rot: float = 1.0
    w_reg: float = 1.0
    w_data: float = 1.0

    def __post_init__(self):
        w = (self.w_rot, self.w_reg, self.w_data)
        if min(w) < 0 or max(w) == 0:
            raise ValueError("energy weights must be non-negative and not all zero")


@dataclass
class InfluenceMatrices:
    M: np.ndarray        # (3m, n)
    C: np.ndarray        # (m, n)
    Lambda: np.ndarray   # (3, 3m)
    T: np.ndarray        # (3, m)
    node_index: np.ndarray  # (n, k) influencing nodes per point
    weights: np.ndarray     # (n, k)

    def deformed(self) -> np.ndarray:
        """``Lambda M + T C``: the deformed cloud before the global pose, (3, n)."""
        return self.Lambda @ self.M + self.T @ self.C


def knn_topology(g: np.ndarray, n_neighbors: int) -> list:
    g = np.asarray(g, dtype=float)
    m = len(g)
    n_neighbors = min(n_neighbors, m - 1)
    d = np.linalg.norm(g[:, None, :] - g[None, :, :], axis=2)
    sets = [set() for _ in range(m)]
    for j in range(m):
        order = np.argsort(d[j], kind="stable")
        for k in order[1:n_neighbors + 1]:
            sets[j].add(int(k))
            sets[int(k)].add(j)
    return [tuple(sorted(s)) for s in sets]


def compute_weights(v, graph: EdGraph) -> list:
    """Influencing nodes of ``v`` and their normalised weights.

    Raw weights are ``1 - |v - g_j| / d_max`` with ``d_max`` the distance to
    the ``(k+1)``-th nearest node; ties go to the lowest node index.
    """
    v = np.asarray(v, dtype=float)
    k = graph.k_influence
    if graph.m < k + 1:
        raise DegenerateGraphError(f"need at least {k + 1} nodes, graph has {graph.m}")
    d = np.linalg.norm(graph.g - v, axis=1)
    order = np.argsort(d, kind="stable")
    near = order[:k]
    d_max = d[order[k]]
    if d_max <= 0.0:
        raise DegenerateGraphError("coincident nodes give d_max = 0")
    raw = np.maximum(1.0 - d[near] / d_max, 0.0)
    total = raw.sum()
    if total <= 0.0:
        raise DegenerateGraphError("all raw weights vanish for this point")
    w = raw / total
    return [(int(j), float(wj)) for j, wj in zip(near, w)]


def warp_point(v, graph: EdGraph, pose: GlobalPose) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    acc = np.zeros(3)
    for j, w in compute_weights(v, graph):
        acc += w * (graph.A[j] @ (v - graph.g[j]) + graph.g[j] + graph.t[j])
    return pose.Rc @ acc + pose.Tc


def build_influence_matrices(points, graph: EdGraph) -> InfluenceMatrices:
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    n, m, k = len(P), graph.m, graph.k_influence
    M = np.zeros((3 * m, n))
    C = np.zeros((m, n))
    idx = np.zeros((n, k), dtype=int)
    wts = np.zeros((n, k))
    for i, v in enumerate(P):
        for slot, (j, w) in enumerate(compute_weights(v, graph)):
            M[3 * j:3 * j + 3, i] = w * (v - graph.g[j])
            C[j, i] = w
            idx[i, slot] = j
            wts[i, slot] = w
    Lambda = np.concatenate(list(graph.A), axis=1)
    return InfluenceMatrices(M=M, C=C, Lambda=Lambda, T=graph.T.T.copy(), node_index=idx, weights=wts)


def _lambda_T(graph: EdGraph) -> tuple[np.ndarray, np.ndarray]:
    return np.concatenate(list(graph.A), axis=1), graph.T.T


def e_data(points, graph: EdGraph, pose: GlobalPose, targets, matrices=None):
    """Data residual ``Rc [Lambda M + T C] + Tc (x) 1 - P_hat`` and its squared norm.

    ``matrices`` only supplies the point-to-node weights; node parameters are
    always read from ``graph``.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    Q = np.asarray(targets, dtype=float).reshape(-1, 3)
    if P.shape != Q.shape:
        raise ValueError(f"points {P.shape} and targets {Q.shape} differ")
    if matrices is None:
        matrices = build_influence_matrices(P, graph)
    Lam, T = _lambda_T(graph)
    residual = pose.Rc @ (Lam @ matrices.M + T @ matrices.C) + pose.Tc[:, None] - Q.T
    return residual, float(np.sum(residual**2))


def rot_residuals(A: np.ndarray) -> np.ndarray:
    """The six column-orthonormality terms of one affine matrix."""
    c1, c2, c3 = A[:, 0], A[:, 1], A[:, 2]
    return np.array([c1 @ c2, c1 @ c3, c2 @ c3, c1 @ c1 - 1.0, c2 @ c2 - 1.0, c3 @ c3 - 1.0])


def e_rot(graph: EdGraph) -> float:
    return float(sum(np.sum(rot_residuals(A) ** 2) for A in graph.A))


def reg_residual(graph: EdGraph, j: int, k: int) -> np.ndarray:
    g, t = graph.g, graph.t
    return graph.A[j] @ (g[k] - g[j]) + g[j] + t[j] - (g[k] + t[k])


def e_reg(graph: EdGraph) -> float:
    return float(sum(a * np.sum(reg_residual(graph, j, k) ** 2) for j, k, a in graph.edges()))


def total_energy(points, graph, pose, targets, weights: EdEnergyWeights, matrices=None) -> float:
    _, data = e_data(points, graph, pose, targets, matrices)
    return weights.w_rot * e_rot(graph) + weights.w_reg * e_reg(graph) + weights.w_data * data


def gauge_rotate(pose: GlobalPose, graph: EdGraph, V0: np.ndarray):
    """Move a rotation ``V0`` from the deformation field into the global pose.

    ``Rc -> Rc V0``, ``A_j -> V0^T A_j`` and ``T -> V0^T T``; every energy
    term keeps its value.
    """
    V0 = np.asarray(V0, dtype=float)
    A = np.einsum("ba,jbc->jac", V0, graph.A)
    t = (graph.T @ V0) - graph.g  # rows: V0^T (t_j + g_j) - g_j
    return GlobalPose(pose.Rc @ V0, pose.Tc.copy()), graph.replace(A=A, t=t)


def gauge_translate(pose: GlobalPose, graph: EdGraph, dT):
    """``Tc -> Tc - dT`` compensated by ``t_j -> t_j + Rc^T dT`` on every node."""
    dT = np.asarray(dT, dtype=float)
    return GlobalPose(pose.Rc.copy(), pose.Tc - dT), graph.replace(t=graph.t + pose.Rc.T @ dT)


# ---------------------------------------------------------------------------
# stacked residuals / Jacobian of the full energy

def param_count(m: int) -> int:
    return 12 * m + 6


def residual_vector(points, graph, pose, targets, weights: EdEnergyWeights, matrices=None) -> np.ndarray:
    """Square-root-weighted residuals whose squared norm is :func:`total_energy`.

    Order: data (3 per point), rotation (6 per node), regularisation (3 per
    directed edge).
    """
    data, _ = e_data(points, graph, pose, targets, matrices)
    rot = np.concatenate([rot_residuals(A) for A in graph.A])
    reg = [np.sqrt(a) * reg_residual(graph, j, k) for j, k, a in graph.edges()]
    reg = np.concatenate(reg) if reg else np.zeros(0)
    return np.concatenate([
        np.sqrt(weights.w_data) * data.T.ravel(),
        np.sqrt(weights.w_rot) * rot,
        np.sqrt(weights.w_reg) * reg,
    ])


def jacobian(points, graph, pose, weights: EdEnergyWeights, matrices=None) -> np.ndarray:
    """Analytic Jacobian of :func:`residual_vector` (dense)."""
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    if matrices is None:
        matrices = build_influence_matrices(P, graph)
    n, m = len(P), graph.m
    edges = list(graph.edges())
    J = np.zeros((3 * n + 6 * m + 3 * len(edges), param_count(m)))
    ot, oo, oc = 9 * m, 12 * m, 12 * m + 3
    Rc = pose.Rc
    Lam, T = _lambda_T(graph)
    U = Lam @ matrices.M + T @ matrices.C
    sd = np.sqrt(weights.w_data)
    # data rows: d r_i / d vec(A_j) = kron(M_j[:, i], Rc) (column-major vec)
    node = matrices.node_index                        # (n, k)
    pts = np.repeat(np.arange(n), node.shape[1])
    nodes = node.ravel()
    Mcol = matrices.M.reshape(m, 3, n)[nodes, :, pts]  # (n*k, 3)
    rows = 3 * pts[:, None] + np.arange(3)[None, :]    # (n*k, 3)
    blockA = sd * Mcol[:, :, None, None] * Rc[None, None]  # (n*k, 3 cols-of-A, 3, 3)
    for q in range(3):
        cols = 9 * nodes[:, None] + 3 * q + np.arange(3)[None, :]
        J[rows[:, :, None], cols[:, None, :]] = blockA[:, q]
    colsT = ot + 3 * nodes[:, None] + np.arange(3)[None, :]
    J[rows[:, :, None], colsT[:, None, :]] = sd * matrices.weights.ravel()[:, None, None] * Rc[None]
    Ux = np.zeros((n, 3, 3))
    Ux[:, 0, 1], Ux[:, 0, 2], Ux[:, 1, 2] = -U[2], U[1], -U[0]
    Ux -= Ux.transpose(0, 2, 1)
    J[:3 * n, oo:oo + 3] = (-sd * np.einsum("ab,nbc->nac", Rc, Ux)).reshape(3 * n, 3)
    J[:3 * n, oc:oc + 3] = np.tile(sd * np.eye(3), (n, 1))
    sr = np.sqrt(weights.w_rot)
    base = 3 * n
    pairs = [(0, 1), (0, 2), (1, 2)]
    for j in range(m):
        A = graph.A[j]
        r0 = base + 6 * j
        for row, (p, q) in enumerate(pairs):
            J[r0 + row, 9 * j + 3 * p:9 * j + 3 * p + 3] += sr * A[:, q]
            J[r0 + row, 9 * j + 3 * q:9 * j + 3 * q + 3] += sr * A[:, p]
        for p in range(3):
            J[r0 + 3 + p, 9 * j + 3 * p:9 * j + 3 * p + 3] = sr * 2.0 * A[:, p]
    base += 6 * m
    sg = np.sqrt(weights.w_reg)
    for e, (j, k, a) in enumerate(edges):
        rows = slice(base + 3 * e, base + 3 * e + 3)
        s = sg * np.sqrt(a)
        J[rows, 9 * j:9 * j + 9] = s * np.kron(graph.g[k] - graph.g[j], np.eye(3))
        J[rows, ot + 3 * j:ot + 3 * j + 3] += s * np.eye(3)
        J[rows, ot + 3 * k:ot + 3 * k + 3] -= s * np.eye(3)
    return J


def retract(graph: EdGraph, pose: GlobalPose, dx: np.ndarray):
    """Apply a parameter increment laid out like the Jacobian columns."""
    m = graph.m
    dA = dx[:9 * m].reshape(m, 3, 3).transpose(0, 2, 1)  # column-major vec
    dT = dx[9 * m:12 * m].reshape(m, 3)
    new_graph = graph.replace(A=graph.A + dA, t=graph.t + dT)
    new_pose = GlobalPose(pose.Rc @ exp_rotation(dx[12 * m:12 * m + 3]), pose.Tc + dx[12 * m + 3:])
    return new_graph, new_pose


def state_difference(graph_a, pose_a, graph_b, pose_b) -> np.ndarray:
    """Coordinates of state ``a`` relative to ``b`` (inverse of :func:`retract`)."""
    dA = (graph_a.A - graph_b.A).transpose(0, 2, 1).ravel()
    dT = (graph_a.T - graph_b.T).ravel()
    dw = log_rotation(pose_b.Rc.T @ pose_a.Rc)
    return np.concatenate([dA, dT, dw, pose_a.Tc - pose_b.Tc])


# ---------------------------------------------------------------------------
# serialisation

def graph_to_dict(graph: EdGraph) -> dict:
    return {
        "nodes": [
            {"g": graph.g[j].tolist(), "A": graph.A[j].ravel().tolist(), "t": graph.t[j].tolist()}
            for j in range(graph.m)
        ],
        "neighbors": [list(nb) for nb in graph.neighbors],
        "alpha": [[j, k, a] for (j, k), a in sorted(graph.alpha.items())],
        "k_influence": graph.k_influence,
    }


def graph_from_dict(doc: dict) -> EdGraph:
    nodes = doc["nodes"]
    return EdGraph(
        g=np.array([n["g"] for n in nodes], dtype=float),
        A=np.array([np.reshape(n.get("A", np.eye(3).ravel()), (3, 3)) for n in nodes], dtype=float),
        t=np.array([n.get("t", [0.0, 0.0, 0.0]) for n in nodes], dtype=float),
        neighbors=doc["neighbors"],
        alpha={(int(j), int(k)): float(a) for j, k, a in doc.get("alpha", [])},
        k_influence=int(doc.get("k_influence", 4)),
    )


def pose_to_dict(pose: GlobalPose) -> dict:
    return {"Rc": pose.Rc.ravel().tolist(), "Tc": pose.Tc.tolist()}


def pose_from_dict(doc: dict) -> GlobalPose:
    return GlobalPose(np.reshape(doc["Rc"], (3, 3)), np.asarray(doc["Tc"], dtype=float))
