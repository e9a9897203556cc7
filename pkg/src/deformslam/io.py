"""JSON and CSV readers/writers for datasets, solutions and metrics.

Every JSON document carries ``"schema_version": 1``. Floats are written with
``repr`` precision so that a write/read round trip is lossless.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .lie import yaw
from .timeseries import ObservationSet, TrajectoryState

SCHEMA_VERSION = 1

TRAJECTORY_HEADER = ["step", "x", "y", "z", "heading_rad"]
METRIC_FIELDS = ["rmse_x", "rmse_y", "rmse_z", "rmse_pos", "rmse_heading", "feature_rmse"]


class SchemaError(ValueError):
    """A document does not follow the expected layout."""


def _require(doc, key, where):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(f"{where}: missing field {key!r}")
    return doc[key]


def _array(value, shape, where):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: not numeric ({exc})") from None
    if shape is not None and arr.shape != shape:
        raise SchemaError(f"{where}: expected shape {shape}, got {arr.shape}")
    return arr


def read_json(path) -> dict:
    """Parse a JSON file; syntax errors are reported with line and column."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{path}: unsupported schema_version {version!r}")
    return doc


def write_json(path, doc: dict):
    doc = {"schema_version": SCHEMA_VERSION, **doc}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=True) + "\n")


# -- trajectory state ------------------------------------------------------------

def state_to_dict(state: TrajectoryState) -> dict:
    """Poses, shapes (``null`` where invalid) and coefficients."""
    shapes = [[state.shapes[i, j].tolist() if state.valid[i, j] else None
               for j in range(state.n_steps)] for i in range(state.shapes.shape[0])]
    return {
        "poses": [{"step": j, "R": state.rotations[j].tolist(), "p": state.positions[j].tolist()}
                  for j in range(state.n_steps)],
        "shapes": shapes,
        "coefficients": state.coeffs.tolist(),
    }


def state_from_dict(doc: dict, where: str = "state") -> TrajectoryState:
    poses = _require(doc, "poses", where)
    F = len(poses)
    R = np.empty((F, 3, 3))
    p = np.empty((F, 3))
    for n, pose in enumerate(poses):
        j = int(_require(pose, "step", f"{where}.poses[{n}]"))
        if not 0 <= j < F:
            raise SchemaError(f"{where}.poses[{n}]: step {j} out of range")
        R[j] = _array(_require(pose, "R", f"{where}.poses[{n}]"), (3, 3), f"{where}.poses[{n}].R")
        p[j] = _array(_require(pose, "p", f"{where}.poses[{n}]"), (3,), f"{where}.poses[{n}].p")
    rows = _require(doc, "shapes", where)
    N = len(rows)
    shapes = np.zeros((N, F, 3))
    valid = np.zeros((N, F), dtype=bool)
    for i, row in enumerate(rows):
        if len(row) != F:
            raise SchemaError(f"{where}.shapes[{i}]: expected {F} entries, got {len(row)}")
        for j, v in enumerate(row):
            if v is not None:
                shapes[i, j] = _array(v, (3,), f"{where}.shapes[{i}][{j}]")
                valid[i, j] = True
    coeffs = _array(_require(doc, "coefficients", where), None, f"{where}.coefficients").ravel()
    return TrajectoryState(R, p, shapes, valid, coeffs)


# -- datasets ------------------------------------------------------------------------

def dataset_to_dict(obs: ObservationSet, truth: TrajectoryState | None = None, meta: dict | None = None) -> dict:
    doc = {"steps": obs.n_steps, "features": obs.n_features, "observations": obs.to_records()}
    if truth is not None:
        doc["ground_truth"] = state_to_dict(truth)
    if meta:
        doc["meta"] = meta
    return doc


def dataset_from_dict(doc: dict):
    """Returns ``(observations, truth or None, meta)``."""
    F = int(_require(doc, "steps", "dataset"))
    N = int(_require(doc, "features", "dataset"))
    if F < 1 or N < 1:
        raise SchemaError("dataset: steps and features must be positive")
    records = _require(doc, "observations", "dataset")
    for n, rec in enumerate(records):
        where = f"dataset.observations[{n}]"
        i = int(_require(rec, "feature", where))
        j = int(_require(rec, "step", where))
        if not (0 <= i < N and 0 <= j < F):
            raise SchemaError(f"{where}: feature {i} / step {j} out of range")
        _array(_require(rec, "z", where), (3,), f"{where}.z")
    try:
        obs = ObservationSet.from_records(N, F, records)
    except ValueError as exc:
        raise SchemaError(f"dataset: {exc}") from None
    truth = None
    if "ground_truth" in doc:
        truth = state_from_dict(doc["ground_truth"], "dataset.ground_truth")
        if truth.n_steps != F or truth.shapes.shape[0] != N:
            raise SchemaError("dataset.ground_truth: size does not match steps/features")
    return obs, truth, doc.get("meta", {})


def save_dataset(path, obs, truth=None, meta=None):
    write_json(path, dataset_to_dict(obs, truth, meta))


def load_dataset(path):
    return dataset_from_dict(read_json(path))


# -- solutions ------------------------------------------------------------------------

def solution_to_dict(state: TrajectoryState, report) -> dict:
    doc = state_to_dict(state)
    doc["energy_trace"] = [float(e) for e in report.energy_trace]
    doc["report"] = report.to_dict()
    return doc


def save_solution(path, state, report):
    write_json(path, solution_to_dict(state, report))


def load_solution(path):
    """Returns ``(state, document)``."""
    doc = read_json(path)
    return state_from_dict(doc, "solution"), doc


# -- CSV -------------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_text(header, rows) -> str:
    """Rows (dicts or sequences) as CSV with ``repr`` floats and ``\\n`` line ends."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        vals = [row.get(h, "") for h in header] if isinstance(row, dict) else list(row)
        w.writerow([_fmt(v) for v in vals])
    return buf.getvalue()


def write_csv(path, header, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(csv_text(header, rows))


def read_csv(path) -> list[dict]:
    """Rows as dicts; numeric cells become floats, others stay strings."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append({k: _parse(v) for k, v in row.items()})
    return out


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def trajectory_rows(state: TrajectoryState) -> list:
    # heading of the robot's forward axis in the world frame
    return [[j, *state.positions[j].tolist(), yaw(state.rotations[j].T)] for j in range(state.n_steps)]


def write_trajectory_csv(path, state: TrajectoryState):
    write_csv(path, TRAJECTORY_HEADER, trajectory_rows(state))
