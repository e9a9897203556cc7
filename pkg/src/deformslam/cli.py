"""Command-line front end: ``deformslam {simulate,solve,observability,montecarlo,fixture}``.

Exit codes: 0 success, 2 configuration or schema error, 3 solver failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import observability as ob
from .io import (METRIC_FIELDS, SchemaError, load_dataset, read_json, save_dataset, save_solution, write_csv,
                 write_json, write_trajectory_csv)
from .montecarlo import METHODS, ExperimentConfig, run_batch
from .simulator import SimConfig, evaluate_rmse, simulate
from .solvers import DEFAULT_ED_WEIGHTS, ed_vo_solve, rigid_slam_solve, solve
from .timeseries import SolverConfig, UnsolvableInstanceError

log = logging.getLogger("deformslam")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


class SolverFailure(RuntimeError):
    """The solver ran but did not produce a usable result."""


def _load_experiment(args) -> ExperimentConfig:
    doc = read_json(args.config) if getattr(args, "config", None) else {}
    doc.pop("schema_version", None)
    cfg = ExperimentConfig.from_dict(doc)
    sim = cfg.sim
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "planar", None) is not None:
        overrides["planar"] = args.planar
    if getattr(args, "sigma", None) is not None:
        overrides["noise_sigma"] = args.sigma
    if getattr(args, "fov", None) is not None:
        overrides["fov_deg"] = args.fov
    if getattr(args, "preset", None) is not None:
        overrides["preset"] = args.preset
    if getattr(args, "window", None) is not None:
        overrides["window"] = args.window
        cfg.solver = SolverConfig.from_dict({**cfg.solver.to_dict(), "window": args.window})
    if overrides:
        cfg.sim = SimConfig.from_dict({**sim.to_dict(), **overrides})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "runs", None) is not None:
        cfg.runs = args.runs
    if getattr(args, "parallel", None) is not None:
        cfg.parallel = args.parallel
    if getattr(args, "method", None):
        cfg.methods = tuple(m for item in args.method for m in item.split(","))
    cfg.__post_init__()
    return cfg


# -- subcommands --------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_experiment(args)
    ds = simulate(cfg.sim)
    meta = {"sim_config": cfg.sim.to_dict(), "fov_deg": ds.fov_deg, "noise_sigma": ds.noise_sigma,
            "deformation": ds.deformation.to_dict() if ds.deformation is not None else None}
    out = Path(args.out)
    save_dataset(out, ds.observations, ds.truth, meta)
    vis = ds.observations.mask
    print(f"seed {cfg.sim.seed}: {vis.shape[0]} features x {vis.shape[1]} steps, "
          f"fov {ds.fov_deg:.1f} deg, sigma {ds.noise_sigma:.2f} mm")
    print(f"visibility {vis.mean():.3f} (per step min {vis.sum(axis=0).min()}, max {vis.sum(axis=0).max()})")
    print(f"wrote {out}")
    return EXIT_OK


def _solver_config(args) -> SolverConfig:
    doc = {}
    if args.config:
        doc = read_json(args.config)
        doc.pop("schema_version", None)
        doc = doc.get("solver", doc)
    if args.window is not None:
        doc["window"] = args.window
    return SolverConfig.from_dict(doc)


def cmd_solve(args) -> int:
    obs, truth, meta = load_dataset(args.dataset)
    cfg = _solver_config(args)
    if args.method == "deformable":
        init = rigid_slam_solve(obs, cfg)[0] if args.init == "rigid" else None
        state, rep = solve(obs, cfg, init=init)
    elif args.method == "rigid":
        state, rep = rigid_slam_solve(obs, cfg)
    else:
        state, rep = ed_vo_solve(obs, DEFAULT_ED_WEIGHTS, cfg)
    if rep.status == "diverged":
        save_solution(Path(args.out) / "solution.json", state, rep)
        raise SolverFailure(f"{args.method} solver diverged after {rep.iterations} iterations")
    out = Path(args.out)
    save_solution(out / "solution.json", state, rep)
    write_trajectory_csv(out / "trajectory.csv", state)
    print(f"{args.method}: status {rep.status}, {rep.iterations} iterations, "
          f"final energy {rep.final_energy:.6g}, {rep.runtime_s:.2f} s")
    if truth is not None:
        planar = meta.get("sim_config", {}).get("planar", True)
        m = evaluate_rmse(state, truth, planar)
        row = {"method": args.method, **m, "final_energy": rep.final_energy, "runtime_s": rep.runtime_s}
        write_csv(out / "metrics.csv", ["method", *METRIC_FIELDS, "final_energy", "runtime_s"], [row])
        print("  " + "  ".join(f"{k} {m[k]:.4g}" for k in METRIC_FIELDS))
    print(f"wrote {out}")
    return EXIT_OK


def _print_fim(rep: ob.FimReport, label: str):
    s = rep.singular_values
    print(f"{label}: dim {rep.dim}, rank {rep.rank}, nullity {rep.nullity}, tol {rep.tolerance_used:.3g}")
    tail = ", ".join(f"{v:.3g}" for v in s[-min(8, len(s)):])
    print(f"  smallest singular values: {tail}")


def cmd_observability(args) -> int:
    doc = read_json(args.input)
    kind = args.formulation or doc.get("kind") or ("timeseries" if "observations" in doc else None)
    if kind is None:
        raise SchemaError(f"{args.input}: cannot tell the formulation; pass --formulation")
    out = {"formulation": kind}
    if kind == "toy":
        inst = ob.ToyInstance.from_dict(doc.get("instance", doc))
        rep = ob.toy_fim(inst, args.rel_tol)
        _print_fim(rep, "toy")
        out["fim"] = rep.to_dict(with_basis=True)
    elif kind == "ed":
        points, graph, pose, targets, weights = ob.ed_fixture_from_dict(doc)
        rep = ob.ed_fim(points, graph, pose, weights, args.rel_tol)
        _print_fim(rep, "ed")
        out["fim"] = rep.to_dict()
        try:
            gauge = ob.verify_gauge_null_directions(points, graph, pose, targets, weights)
            out["gauge"] = gauge.to_dict()
            print(f"  gauge directions null: {gauge.passed} (max ratio {gauge.ratios.max():.2e})")
        except ValueError as exc:
            out["gauge"] = {"skipped": str(exc)}
            print(f"  gauge check skipped: {exc}")
        law = ob.check_hessian_law(points[0], graph, pose)
        out["hessian_law"] = law.to_dict()
        print(f"  Hessian law: H2 error {law.h2_error:.2e}, H1 error (row space) {law.h1_error:.2e}, "
              f"passed {law.passed}")
    elif kind == "timeseries":
        from .io import dataset_from_dict

        obs, truth, _ = dataset_from_dict(doc)
        cfg = SolverConfig(window=args.window or 5, fix_coefficients=args.fix_coefficients)
        if truth is None:
            state, _ = solve(obs, cfg)
        else:
            state = truth.copy()
            state.valid = obs.mask.copy()
            if len(state.coeffs) != cfg.window:
                from .simulator import fit_coefficients

                state.coeffs = fit_coefficients(truth.shapes, truth.valid, cfg.window)
        rep, sl = ob.timeseries_fim(obs, state, cfg, args.rel_tol)
        _print_fim(rep, "timeseries")
        out["fim"] = rep.to_dict()
        if rep.nullity and sl.stop > sl.start:
            share = rep.null_support(np.arange(rep.dim)[sl])
            out["null_support_on_coefficients"] = share
            print(f"  null-space share on c: {share:.3f}")
    else:
        raise SchemaError(f"unknown formulation {kind!r}")
    if args.out:
        write_json(args.out, out)
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    cfg = _load_experiment(args)
    batch = run_batch(cfg, args.out)
    print(f"{cfg.runs} runs x {len(cfg.methods)} methods in {batch.wall_time_s:.1f} s")
    for row in batch.summary:
        print(f"  {row['method']:<10} median pos {row['median_rmse_pos']:.3f} mm, "
              f"x {row['median_rmse_x']:.3f}, y {row['median_rmse_y']:.3f}, "
              f"heading {row['median_rmse_heading']:.4f} rad, ok {row['n_ok']}/{row['n_runs']}, wins {row['wins']}")
    if len(cfg.methods) > 1:
        r = batch.summary[0]
        print(f"  ordering {' < '.join(m for m in METHODS if m in cfg.methods)}: "
              f"{r['ordering_runs']}/{cfg.runs} runs")
    nested = [n for n in batch.nested if n is not None]
    if nested:
        print(f"  nesting held in {sum(nested)}/{len(nested)} runs")
    if args.out:
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_fixture(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.kind in ("toy-moving", "toy-static"):
        inst = ob.make_toy_instance(rng, moving=args.kind == "toy-moving")
        doc = {"kind": "toy", "instance": inst.to_dict()}
    elif args.kind == "ed":
        doc = ob.ed_fixture_to_dict(*ob.make_ed_instance(rng, m=8, n=20, consistent=True), DEFAULT_ED_WEIGHTS)
    else:
        ds = simulate(SimConfig(amplitude_scale=0.0, noise_sigma=0.0, n_steps=20, seed=args.seed))
        from .io import dataset_to_dict

        truth = ds.truth.copy()
        truth.coeffs = np.r_[1.0, np.zeros(4)]
        doc = {"kind": "timeseries", **dataset_to_dict(ds.observations, truth)}
    write_json(args.out, doc)
    print(f"wrote {args.kind} fixture to {args.out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------

def _add_sim_flags(p):
    p.add_argument("--config", help="experiment config JSON (sections sim, solver, ed, methods, runs)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--planar", dest="planar", action="store_true", default=None, help="planar motion")
    p.add_argument("--no-planar", dest="planar", action="store_false", help="full 3-D motion")
    p.add_argument("--sigma", type=float, help="fix the observation noise (mm)")
    p.add_argument("--fov", type=float, help="fix the full viewing angle (deg)")
    p.add_argument("--preset", help="deformation preset")
    p.add_argument("--window", type=int, help="prior window t")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformslam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset")
    _add_sim_flags(p)
    p.add_argument("--out", required=True, help="dataset JSON path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("solve", help="solve a dataset with one method")
    p.add_argument("dataset")
    p.add_argument("--method", choices=METHODS, default="deformable")
    p.add_argument("--config", help="solver config JSON (or an experiment config with a solver section)")
    p.add_argument("--window", type=int)
    p.add_argument("--init", choices=["rigid", "odometry"], default="rigid",
                   help="deformable starting point (default: rigid solution)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("observability", help="information-matrix rank report")
    p.add_argument("input", help="dataset or fixture JSON")
    p.add_argument("--formulation", choices=["ed", "timeseries", "toy"])
    p.add_argument("--rel-tol", type=float, default=ob.DEFAULT_REL_TOL)
    p.add_argument("--window", type=int)
    p.add_argument("--fix-coefficients", action="store_true")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_observability)

    p = sub.add_parser("montecarlo", help="seeded batch over all methods")
    _add_sim_flags(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--parallel", type=int)
    p.add_argument("--method", action="append", help="method(s), repeatable or comma separated")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_montecarlo)

    p = sub.add_parser("fixture", help="write an observability fixture")
    p.add_argument("kind", choices=["toy-moving", "toy-static", "ed", "timeseries-static"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UnsolvableInstanceError, SolverFailure) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, KeyError, TypeError) as exc:
        # includes SchemaError and config validation
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
