"""Corpus-level acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, SCENARIOS
from frenetplan import cli
from frenetplan.basis import eval_traj, make_basis
from frenetplan.behavior import BehaviorDistribution, RefinementConfig, refine_behaviors, sample_behaviors
from frenetplan.grad import Pipeline, gradcheck
from frenetplan.projection import Scene, project, project_batch
from frenetplan.setpoint_qp import BehavioralInput, EgoBoundary, SetpointWeights, batch_setpoint_solve, build_qp, kkt_residuals, solve_eq_qp
from frenetplan.sim import PlannerConfig, SimConfig, compute_metrics, generate_corpus, run_closed_loop
from scenegen import feasible_projection_scenes
from test_grad import smooth_instances
from test_projection import alpha_d_grid_check, run_instrumented


def record(n, ok, detail):
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return ok


@pytest.fixture(scope="module")
def projection_runs():
    basis = make_basis()
    t0 = time.perf_counter()
    scenes = feasible_projection_scenes(100, seed=0, basis=basis)
    results = [project(xi0, scene, basis) for xi0, scene, _ in scenes]
    return SimpleNamespace(basis=basis, scenes=scenes, results=results, elapsed=time.perf_counter() - t0)


def test_criterion_01_equality_qp(basis):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        w = SetpointWeights(*rng.uniform(0.05, 3, 3), kappa_p=rng.uniform(0.2, 3), kappa_v=rng.uniform(0.2, 4))
        b0 = EgoBoundary(rng.uniform(-10, 10), rng.uniform(0, 12), rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(-1, 1), rng.uniform(-1, 1))
        qp = build_qp(basis, w, BehavioralInput(rng.uniform(0, 12), rng.uniform(-2, 2)), b0)
        worst = max(worst, *kkt_residuals(qp, *solve_eq_qp(qp)))
    qp = build_qp(basis, SetpointWeights(), BehavioralInput(5.0, 0.0), EgoBoundary(xd=5.0))
    s = eval_traj(basis, solve_eq_qp(qp)[0])
    line_err = max(np.max(np.abs(s.x - 5.0 * basis.t)), np.max(np.abs(s.y)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and line_err <= 1e-6 and elapsed < 5.0
    assert record(1, ok, f"max scaled KKT residual {worst:.2e} (<=1e-8), stationary line error {line_err:.2e} (<=1e-6), {elapsed:.2f}s (<5s)")


def test_criterion_02_alpha_d_grid(basis):
    t0 = time.perf_counter()
    gap = alpha_d_grid_check(np.random.default_rng(2), basis, 50)
    elapsed = time.perf_counter() - t0
    ok = gap <= 1e-8 and elapsed < 30.0
    assert record(2, ok, f"closed form minus grid minimum {gap:.2e} (<=1e-8), {elapsed:.2f}s (<30s)")


def test_criterion_03_projection_feasibility(projection_runs):
    res = projection_runs.results
    conv = [r for r in res if r.converged]
    worst = max((max(r.max_violation.values()) for r in conv), default=0.0)
    within = all(r.iters <= 100 for r in conv)
    ok = len(conv) >= 95 and worst <= 1e-2 and within and projection_runs.elapsed < 120.0
    assert record(
        3,
        ok,
        f"{len(conv)}/100 converged (>=95), worst violation when converged {worst:.2e} (<=1e-2), {projection_runs.elapsed:.1f}s (<120s)",
    )


def test_criterion_04_fixed_point_contract(projection_runs):
    basis = projection_runs.basis
    decayed = sum(r.final_residual <= max(1e-3, r.initial_residual / 10) for r in projection_runs.results)
    drift = 0.0
    for xi0, scene, _ in projection_runs.scenes:
        A, b, iterates, _, _ = run_instrumented(xi0, scene, basis)
        drift = max([drift] + [float(np.max(np.abs(A @ x - b))) for x in iterates])
    ok = decayed == 100 and drift <= 1e-8
    assert record(4, ok, f"residual decay on {decayed}/100 scenes (all), max |A xi - b| over iterates {drift:.2e} (<=1e-8)")


def test_criterion_05_batch_matches_sequential(basis):
    rng = np.random.default_rng(5)
    ego = EgoBoundary(xd=6.0, y=0.2)
    scene = Scene.from_obstacle_states(ego, np.array([[22, 0.5, 2, 0], [40, -1.0, 0, 0]]), basis.t)
    inputs = [BehavioralInput(v, y) for v, y in zip(rng.uniform(1, 12, 16), rng.uniform(-1.7, 1.7, 16))]
    xis = batch_setpoint_solve(basis, SetpointWeights(), inputs, ego)
    batch = project_batch(xis, scene, basis)
    seq = [project(x, scene, basis) for x in xis]
    diff = max(float(np.max(np.abs(a.xi_proj - b.xi_proj))) for a, b in zip(batch, seq))
    assert record(5, diff <= 1e-10, f"max elementwise batch/sequential difference {diff:.1e} (<=1e-10)")


def test_criterion_06_gradients(basis):
    t0 = time.perf_counter()
    worst = 0.0
    for p, scene in smooth_instances(basis, 10):
        errs, smooth = gradcheck(p, scene, basis, eps=1e-5)
        assert smooth
        worst = max(worst, *errs.values())
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 120.0
    assert record(6, ok, f"max relative error {worst:.2e} on 10 smooth instances (<=1e-4), {elapsed:.1f}s (<120s)")


def refinement_instance(rng, basis):
    ego = EgoBoundary(xd=rng.uniform(2, 8), y=rng.uniform(-1, 1))
    scene = Scene.from_obstacle_states(ego, np.zeros((0, 4)), basis.t)
    goal = np.array([rng.uniform(20, 50), rng.uniform(-1.5, 1.5)])
    return scene, goal


def test_criterion_07_refinement_vs_grid(basis):
    rng = np.random.default_rng(7)
    cfg = RefinementConfig()
    t0 = time.perf_counter()
    ratios, misses = [], 0
    for i in range(50):
        scene, goal = refinement_instance(rng, basis)
        pipe = Pipeline.build(basis, scene)
        vs = np.arange(scene.v_min, scene.v_max + 1e-9, 0.25)
        ys = np.arange(scene.y_lb, scene.y_ub + 1e-9, 0.05)
        grid = np.array([[v, y] for v in vs for y in ys])
        grid_best = float(pipe.loss_terms(pipe.forward(grid, cfg.unroll_iters), goal)[0].min())
        refined = refine_behaviors(sample_behaviors(BehaviorDistribution(), i, scene), scene, basis, goal, cfg)
        P = np.array([b.p for b in refined])
        ref_best = float(pipe.loss_terms(pipe.forward(P, cfg.unroll_iters), goal)[0].min())
        ratios.append(ref_best / max(grid_best, 1e-300))
        misses += ref_best > 1.1 * grid_best
    elapsed = time.perf_counter() - t0
    ok = misses == 0 and elapsed < 300.0
    assert record(7, ok, f"{50 - misses}/50 within 10% of the grid oracle (worst ratio {max(ratios):.3f}), {elapsed:.1f}s (<300s)")


@pytest.mark.slow
def test_criterion_08_closed_loop_corpus():
    sim = SimConfig()
    planner = PlannerConfig()
    t0 = time.perf_counter()
    corpus = generate_corpus(100, seed=0, basis=planner.basis(), sim=sim)
    metrics = [compute_metrics(run_closed_loop(scene, goal, planner, sim, seed=i), goal, sim) for i, (scene, goal) in enumerate(corpus)]
    elapsed = time.perf_counter() - t0
    sr = np.mean([m.success for m in metrics])
    coll = sum(m.collision for m in metrics)
    ok = sr >= 0.8 and coll == 0 and elapsed < 600.0
    assert record(8, ok, f"success rate {sr:.2f} (>=0.80) at 3 m, {coll} collisions (0), {elapsed:.0f}s (<600s)")


def test_criterion_09_idempotence(projection_runs):
    basis = projection_runs.basis
    moves = [
        float(np.linalg.norm(project(r.xi_proj, scene, basis).xi_proj - r.xi_proj))
        for (_, scene, _), r in zip(projection_runs.scenes, projection_runs.results)
        if r.converged
    ]
    worst = max(moves)
    assert record(9, worst <= 1e-4, f"max re-projection move {worst:.2e} over {len(moves)} converged cases (<=1e-4)")


def test_criterion_10_simulate_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["simulate", str(SCENARIOS / "traffic.json"), "--seed", "11", "--out", str(out)]) == 0
    same = (a / "simlog.csv").read_bytes() == (b / "simlog.csv").read_bytes()
    assert record(10, same, f"simlog.csv byte-identical across two runs: {same}")
