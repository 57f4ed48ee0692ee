"""Command-line entry point.

Exit codes: 0 ok, 1 input error, 2 infeasible plan, 3 gradient check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .basis import eval_traj, make_basis
from .behavior import plan
from .errors import CorpusGenerationFailed, KinkWarning, PlannerError
from .grad import gradcheck
from .ioutil import atomic_write_text
from .scenario import ScenarioError, load_config, load_scenario, scene_to_dict
from .setpoint_qp import BehavioralInput
from .sim import SimLog, compute_metrics, generate_corpus, log_to_csv, log_to_svg, run_closed_loop

EXIT_OK, EXIT_INPUT, EXIT_INFEASIBLE, EXIT_GRADCHECK = 0, 1, 2, 3
FEASIBILITY_TOL = 1e-2
GRADCHECK_TOL = 1e-4


def _dump_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _traj_csv(basis, xi) -> str:
    s = eval_traj(basis, xi)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x", "y", "vx", "vy", "ax", "ay"])
    for k in range(basis.m):
        w.writerow([f"{v:.6f}" for v in (basis.t[k], s.x[k], s.y[k], s.xd[k], s.yd[k], s.xdd[k], s.ydd[k])])
    return buf.getvalue()


def _load(args):
    cfg = load_config(args.config)
    return load_scenario(args.scenario, cfg)


def cmd_plan(args) -> int:
    sc = _load(args)
    cfg = sc.config
    basis = make_basis(**cfg.basis)
    t0 = time.perf_counter()
    out = plan(sc.scene, basis, sc.goal, cfg.dist, cfg.refine, args.seed, cfg.weights, cfg.params)
    elapsed = time.perf_counter() - t0
    res = out.result
    feasible = max(res.max_violation.values()) <= FEASIBILITY_TOL
    summary = {
        "command": "plan",
        "seed": args.seed,
        "feasible": feasible,
        "selected_index": out.index,
        "v_d": float(out.inputs[out.index].v_d),
        "y_d": float(out.inputs[out.index].y_d),
        "goal_loss": out.goal_loss,
        "planner_loss": out.planner_loss,
        "max_violation": res.max_violation,
        "converged": res.converged,
        "iters": res.iters,
        "final_residual": res.final_residual,
        "initial_residual": res.initial_residual,
        "batch_converged": int(sum(r.converged for r in out.results)),
        "timing_s": round(elapsed, 3),
    }
    outdir = Path(args.out)
    atomic_write_text(outdir / "trajectory.csv", _traj_csv(basis, res.xi_proj))
    s = eval_traj(basis, res.xi_proj)
    pseudo = SimLog(
        t=basis.t,
        ego=np.column_stack([s.x, s.y, s.xd, s.yd, s.xdd, s.ydd]),
        obstacles=np.stack([sc.scene.obs_x.T, sc.scene.obs_y.T], axis=-1),
        violations={},
    )
    atomic_write_text(outdir / "plan.svg", log_to_svg(pseudo, sc.goal, sc.scene))
    _dump_json(outdir / "summary.json", summary)
    print(f"plan: feasible={feasible} goal_loss={out.goal_loss:.4f} planner_loss={out.planner_loss:.4g} -> {outdir}")
    return EXIT_OK if feasible else EXIT_INFEASIBLE


def cmd_simulate(args) -> int:
    sc = _load(args)
    cfg = sc.config
    t0 = time.perf_counter()
    log = run_closed_loop(sc.scene, sc.goal, cfg.closed_loop_planner(), cfg.sim, args.seed)
    metrics = compute_metrics(log, sc.goal, cfg.sim)
    outdir = Path(args.out)
    atomic_write_text(outdir / "simlog.csv", log_to_csv(log))
    atomic_write_text(outdir / "sim.svg", log_to_svg(log, sc.goal, sc.scene))
    summary = {
        **metrics.as_dict(),
        "outcome": log.outcome,
        "seed": args.seed,
        "replans": len(log.plans),
        "replans_converged": int(sum(log.converged)),
        "timing_s": round(time.perf_counter() - t0, 3),
    }
    _dump_json(outdir / "metrics.json", summary)
    print(f"simulate: outcome={log.outcome} success={metrics.success} min_fde={metrics.min_fde:.3f} -> {outdir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    sc = _load(args)
    cfg = sc.config
    basis = make_basis(**cfg.basis)
    scene = sc.scene
    v_d = float(np.clip((sc.goal[0] - scene.ego0.x) / basis.horizon, scene.v_min, scene.v_max))
    y_d = float(np.clip(sc.goal[1], scene.y_lb, scene.y_ub))
    p = BehavioralInput(v_d, y_d)
    errs, smooth = gradcheck(p, scene, basis, cfg.weights, cfg.params, cfg.refine.unroll_iters, args.eps)
    print(f"gradcheck: eps={args.eps:g} unroll_iters={cfg.refine.unroll_iters} p=({v_d:.4f}, {y_d:.4f})")
    for name, e in errs.items():
        print(f"  {name}: max relative error {e:.3e}")
    if not smooth:
        print("  KinkWarning: unrolled graph touches a clip/hinge boundary; instance excluded from the gate")
        return EXIT_OK
    worst = max(errs.values())
    ok = worst <= GRADCHECK_TOL
    print(f"  {'PASS' if ok else 'FAIL'} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if ok else EXIT_GRADCHECK


def _simulate_entry(job):
    i, scene, goal, planner, simcfg, seed = job
    log = run_closed_loop(scene, goal, planner, simcfg, seed)
    m = compute_metrics(log, goal, simcfg)
    return i, m, log.outcome


def cmd_batch(args) -> int:
    cfg = load_config(args.config)
    basis = make_basis(**cfg.basis)
    try:
        corpus = generate_corpus(args.size, args.seed, basis, cfg.sim)
    except CorpusGenerationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    planner = cfg.closed_loop_planner()
    jobs = [(i, scene, goal, planner, cfg.sim, args.seed + i) for i, (scene, goal) in enumerate(corpus)]
    t0 = time.perf_counter()
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as ex:
            results = sorted(ex.map(_simulate_entry, jobs), key=lambda r: r[0])
    else:
        results = [_simulate_entry(j) for j in jobs]
    outdir = Path(args.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "n_obs", "goal_x", "goal_y", "outcome", "success", "collision", "min_fde", "smoothness"])
    for (i, m, outcome), (scene, goal) in zip(results, corpus):
        w.writerow([i, scene.n_obs, f"{goal[0]:.6f}", f"{goal[1]:.6f}", outcome, int(m.success), int(m.collision), f"{m.min_fde:.6f}", f"{m.smoothness:.6f}"])
    atomic_write_text(outdir / "batch.csv", buf.getvalue())
    ms = [r[1] for r in results]
    summary = {
        "size": args.size,
        "seed": args.seed,
        "success_rate": float(np.mean([m.success for m in ms])),
        "collision_rate": float(np.mean([m.collision for m in ms])),
        "mean_min_fde": float(np.mean([m.min_fde for m in ms])),
        "mean_smoothness": float(np.mean([m.smoothness for m in ms])),
        "timing_s": round(time.perf_counter() - t0, 3),
    }
    _dump_json(outdir / "summary.json", summary)
    if args.export_scenarios:
        for i, (scene, goal) in enumerate(corpus):
            _dump_json(outdir / "scenarios" / f"scenario_{i:03d}.json", scene_to_dict(scene, goal))
    print(
        f"batch: size={args.size} success_rate={summary['success_rate']:.3f} "
        f"collisions={sum(m.collision for m in ms)} mean_min_fde={summary['mean_min_fde']:.3f} -> {outdir}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--out", default="out", help="output directory (default ./out)")
    common.add_argument("--config", default=None, help="JSON file overriding planner defaults")

    parser = argparse.ArgumentParser(prog="frenetplan", description="Differentiable Frenet-frame trajectory planner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", parents=[common], help="single open-loop plan")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("simulate", parents=[common], help="closed-loop simulation")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", parents=[common], help="unrolled Jacobian vs finite differences")
    p.add_argument("scenario")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("batch", parents=[common], help="simulate a generated corpus")
    p.add_argument("--size", type=int, default=100, help="number of scenarios (default 100)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    p.add_argument("--export-scenarios", action="store_true", help="also write each scenario as JSON")
    p.set_defaults(func=cmd_batch)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "size", 1) < 1:
        print("error: --size must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", KinkWarning)
            return args.func(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except PlannerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
