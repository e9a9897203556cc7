"""Seeded Monte Carlo batches comparing the deformable, rigid and ED-VO solvers.

Run ``r`` of a batch with master seed ``s`` draws its dataset from
``SeedSequence([s, r])``, so results do not depend on worker count or
scheduling. Per-run and summary CSVs hold no timing data and are therefore
byte-reproducible; wall-clock times go to ``timing.json``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ed_graph as ed
from .io import METRIC_FIELDS, write_csv, write_json
from .simulator import SimConfig, evaluate_rmse, simulate
from .solvers import DEFAULT_ED_WEIGHTS, ed_vo_solve, rigid_slam_solve, solve
from .timeseries import SolverConfig

log = logging.getLogger(__name__)

METHODS = ("deformable", "rigid", "ed_vo")
RUN_HEADER = ["run", "method", *METRIC_FIELDS, "final_energy", "iterations", "status"]
SUMMARY_STATS = ["rmse_x", "rmse_y", "rmse_pos", "rmse_heading", "feature_rmse"]
SUMMARY_HEADER = (["method", "n_runs", "n_ok"]
                  + [f"{s}_{m}" for m in SUMMARY_STATS for s in ("median", "mean")]
                  + ["wins", "ordering_runs", "ordering_fraction"])


@dataclass
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    ed: ed.EdEnergyWeights = field(default_factory=lambda: DEFAULT_ED_WEIGHTS)
    methods: tuple = METHODS
    runs: int = 50
    seed: int = 0
    parallel: int = 1
    ed_nodes: int = 8
    ed_iterations: int = 10

    def __post_init__(self):
        self.methods = tuple(self.methods)
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if not self.methods:
            raise ValueError("at least one method is required")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown method(s) {sorted(bad)}; choose from {list(METHODS)}")
        if self.parallel < 1:
            raise ValueError("parallel must be >= 1")
        if self.sim.n_steps <= self.solver.window:
            raise ValueError("n_steps must exceed the prior window")

    def to_dict(self) -> dict:
        return {"sim": self.sim.to_dict(), "solver": self.solver.to_dict(),
                "ed": {"w_rot": self.ed.w_rot, "w_reg": self.ed.w_reg, "w_data": self.ed.w_data},
                "methods": list(self.methods), "runs": self.runs, "seed": self.seed,
                "parallel": self.parallel, "ed_nodes": self.ed_nodes, "ed_iterations": self.ed_iterations}

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        known = {"sim", "solver", "ed", "methods", "runs", "seed", "parallel", "ed_nodes", "ed_iterations"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown experiment option(s): {sorted(unknown)}")
        if "sim" in doc:
            doc["sim"] = SimConfig.from_dict(doc["sim"])
        if "solver" in doc:
            doc["solver"] = SolverConfig.from_dict(doc["solver"])
        if "ed" in doc:
            doc["ed"] = ed.EdEnergyWeights(**doc["ed"])
        return cls(**doc)


def run_rng(seed: int, run: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, run]))


def _row(run, method, state, report, truth, planar):
    m = evaluate_rmse(state, truth, planar)
    return {"run": run, "method": method, **{k: m[k] for k in METRIC_FIELDS},
            "final_energy": report.final_energy, "iterations": report.iterations, "status": report.status}


def _failed_row(run, method, exc):
    return {"run": run, "method": method, **{k: float("nan") for k in METRIC_FIELDS},
            "final_energy": float("nan"), "iterations": 0, "status": f"error:{type(exc).__name__}"}


def run_single(config: ExperimentConfig, run: int):
    """Simulate run ``run`` and solve it with every requested method.

    The deformable solver starts from the rigid solution, which is computed
    even when ``rigid`` is not requested. Returns ``(rows, timings, nested)``
    where ``nested`` tells whether the deformable energy did not exceed the
    rigid one (``None`` when either is missing).
    """
    ds = simulate(config.sim, run_rng(config.seed, run))
    planar = config.sim.planar
    rows, timings = {}, {}
    rigid = None
    need_rigid = "rigid" in config.methods or "deformable" in config.methods
    if need_rigid:
        t0 = time.perf_counter()
        try:
            rigid = rigid_slam_solve(ds.observations, config.solver)
            rows["rigid"] = _row(run, "rigid", *rigid, ds.truth, planar)
        except Exception as exc:  # noqa: BLE001 - batch keeps going
            log.warning("run %d rigid failed: %s", run, exc)
            rows["rigid"] = _failed_row(run, "rigid", exc)
        timings["rigid"] = time.perf_counter() - t0
    nested = None
    if "deformable" in config.methods:
        t0 = time.perf_counter()
        try:
            init = rigid[0] if rigid is not None else None
            state, rep = solve(ds.observations, config.solver, init=init)
            rows["deformable"] = _row(run, "deformable", state, rep, ds.truth, planar)
            if rigid is not None:
                nested = bool(rep.final_energy <= rigid[1].final_energy + 1e-9)
        except Exception as exc:  # noqa: BLE001
            log.warning("run %d deformable failed: %s", run, exc)
            rows["deformable"] = _failed_row(run, "deformable", exc)
        timings["deformable"] = time.perf_counter() - t0 + timings.get("rigid", 0.0)
    if "ed_vo" in config.methods:
        t0 = time.perf_counter()
        try:
            state, rep = ed_vo_solve(ds.observations, config.ed, config.solver, config.ed_nodes,
                                     config.ed_iterations)
            rows["ed_vo"] = _row(run, "ed_vo", state, rep, ds.truth, planar)
        except Exception as exc:  # noqa: BLE001
            log.warning("run %d ed_vo failed: %s", run, exc)
            rows["ed_vo"] = _failed_row(run, "ed_vo", exc)
        timings["ed_vo"] = time.perf_counter() - t0
    out = [rows[m] for m in config.methods]
    return out, {m: timings[m] for m in config.methods}, nested


def _run_task(args):
    config, run = args
    return run_single(config, run)


def ordering_holds(by_method: dict) -> bool:
    """Deformable < rigid < ED-VO in position RMSE, over the requested methods."""
    vals = [by_method[m]["rmse_pos"] for m in METHODS if m in by_method]
    if any(not np.isfinite(v) for v in vals):
        return False
    return all(a < b for a, b in zip(vals, vals[1:]))


def summarize(rows: list[dict], methods) -> list[dict]:
    runs = sorted({r["run"] for r in rows})
    per_run = {run: {r["method"]: r for r in rows if r["run"] == run} for run in runs}
    ordered = sum(ordering_holds(per_run[run]) for run in runs)
    wins = {m: 0 for m in methods}
    for run in runs:
        vals = {m: per_run[run][m]["rmse_pos"] for m in methods if np.isfinite(per_run[run][m]["rmse_pos"])}
        if vals:
            wins[min(vals, key=vals.get)] += 1
    out = []
    for m in methods:
        mine = [r for r in rows if r["method"] == m]
        ok = [r for r in mine if not str(r["status"]).startswith("error")]
        row = {"method": m, "n_runs": len(mine), "n_ok": len(ok)}
        for stat in SUMMARY_STATS:
            v = np.array([r[stat] for r in ok], dtype=float)
            v = v[np.isfinite(v)]
            row[f"median_{stat}"] = float(np.median(v)) if v.size else float("nan")
            row[f"mean_{stat}"] = float(np.mean(v)) if v.size else float("nan")
        row["wins"] = wins[m]
        row["ordering_runs"] = ordered
        row["ordering_fraction"] = ordered / len(runs) if runs else float("nan")
        out.append(row)
    return out


@dataclass
class BatchResult:
    rows: list
    summary: list
    nested: list
    timings: list
    wall_time_s: float

    def summary_by_method(self) -> dict:
        return {r["method"]: r for r in self.summary}

    def per_run(self) -> dict:
        out = {}
        for r in self.rows:
            out.setdefault(r["run"], {})[r["method"]] = r
        return out


def run_batch(config: ExperimentConfig, out_dir=None, parallel: int | None = None) -> BatchResult:
    """Run every seeded draw and optionally write ``runs.csv``, ``summary.csv``,
    ``nesting.csv`` and ``timing.json`` into ``out_dir``."""
    parallel = config.parallel if parallel is None else parallel
    t0 = time.perf_counter()
    tasks = [(config, run) for run in range(config.runs)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_run_task, tasks))
    else:
        results = [_run_task(t) for t in tasks]
    rows = [r for res in results for r in res[0]]
    timings = [{"run": run, **res[1]} for run, res in enumerate(results)]
    nested = [res[2] for res in results]
    summary = summarize(rows, config.methods)
    batch = BatchResult(rows, summary, nested, timings, time.perf_counter() - t0)
    if out_dir is not None:
        write_batch(batch, out_dir, config)
    return batch


def write_batch(batch: BatchResult, out_dir, config: ExperimentConfig | None = None):
    out = Path(out_dir)
    write_csv(out / "runs.csv", RUN_HEADER, batch.rows)
    write_csv(out / "summary.csv", SUMMARY_HEADER, batch.summary)
    write_csv(out / "nesting.csv", ["run", "nested"],
              [[run, "" if n is None else str(n).lower()] for run, n in enumerate(batch.nested)])
    doc = {"wall_time_s": batch.wall_time_s, "runs": batch.timings}
    if config is not None:
        doc["config"] = config.to_dict()
    write_json(out / "timing.json", doc)
