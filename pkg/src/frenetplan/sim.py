"""Closed-loop replanning harness, driving metrics and scenario corpus."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .basis import BasisSet, make_basis
from .behavior import BehaviorDistribution, RefinementConfig, plan
from .errors import CorpusGenerationFailed, EmptyLog
from .projection import ProjectionParams, Scene
from .setpoint_qp import BehavioralInput, EgoBoundary, KktSolver, SetpointWeights, build_qp

VIOLATION_KEYS = ("collision", "speed", "accel", "lane")


@dataclass(frozen=True)
class SimConfig:
    replan_dt: float = 0.5
    sim_dt: float = 0.1
    max_time: float = 30.0
    success_radius: float = 3.0

    def __post_init__(self):
        if not 0 < self.sim_dt <= self.replan_dt:
            raise ValueError("need 0 < sim_dt <= replan_dt")
        if not self.success_radius > 0 or not self.max_time > 0:
            raise ValueError("success_radius and max_time must be positive")
        ratio = self.replan_dt / self.sim_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("replan_dt must be a multiple of sim_dt")

    @property
    def substeps(self) -> int:
        return int(round(self.replan_dt / self.sim_dt))


@dataclass(frozen=True)
class PlannerConfig:
    """Planner settings used inside the closed loop."""

    degree: int = 10
    horizon: float = 6.0
    m: int = 30
    dist: BehaviorDistribution = BehaviorDistribution(num_samples=8)
    refine: RefinementConfig = RefinementConfig(steps=4, unroll_iters=20)
    weights: SetpointWeights = SetpointWeights()
    params: ProjectionParams = ProjectionParams()
    # Safety margin on the ellipse used for planning (execution checks the true one).
    inflation: float = 1.1
    # Selection weights (goal, planner) favour constraint satisfaction.
    select_weights: tuple = (1.0, 100.0)
    # Plans within this worst violation win over any infeasible candidate.
    feasible_tol: Optional[float] = 1e-2
    # Center sampled setpoints on the goal's lateral offset and the speed needed to reach it.
    goal_centered: bool = True

    def basis(self) -> BasisSet:
        return make_basis(self.degree, self.horizon, self.m)


@dataclass
class SimLog:
    t: np.ndarray  # (K,)
    ego: np.ndarray  # (K, 6): x, y, vx, vy, ax, ay
    obstacles: np.ndarray  # (K, N, 2)
    violations: dict  # key -> (K,)
    plan_times: list = field(default_factory=list)
    plans: list = field(default_factory=list)  # chosen coefficient vectors
    inputs: list = field(default_factory=list)  # chosen (v_d, y_d)
    endpoints: list = field(default_factory=list)  # planned endpoint (x, y)
    converged: list = field(default_factory=list)
    outcome: str = "timeout"

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class Metrics:
    min_fde: float
    smoothness: float
    success: bool
    collision: bool
    time_to_goal: Optional[float]

    def as_dict(self) -> dict:
        return {
            "min_fde": self.min_fde,
            "smoothness": self.smoothness,
            "success": self.success,
            "collision": self.collision,
            "time_to_goal": self.time_to_goal,
        }


def propagate_obstacles(scene: Scene, dt: float) -> Scene:
    """Advance obstacles at constant velocity and regenerate their predictions."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    if scene.obs_state is None or scene.n_obs == 0:
        return scene
    st = scene.obs_state.copy()
    st[:, 0:2] += dt * st[:, 2:4]
    t = scene.t_grid if scene.t_grid is not None else np.zeros(scene.obs_x.shape[1])
    return replace(
        scene,
        obs_state=st,
        obs_x=st[:, 0:1] + st[:, 2:3] * t[None, :],
        obs_y=st[:, 1:2] + st[:, 3:4] * t[None, :],
    )


def sample_violations(pos, vel, acc, obs_xy, scene: Scene) -> dict:
    """Violations of one executed sample against the true scene limits."""
    out = {}
    if len(obs_xy):
        val = ((pos[0] - obs_xy[:, 0]) / scene.ell_a) ** 2 + ((pos[1] - obs_xy[:, 1]) / scene.ell_b) ** 2
        out["collision"] = float(max(0.0, 1.0 - val.min()))
    else:
        out["collision"] = 0.0
    out["speed"] = float(max(0.0, math.hypot(*vel) - scene.v_max))
    out["accel"] = float(max(0.0, math.hypot(*acc) - scene.a_max))
    out["lane"] = float(max(0.0, pos[1] - scene.y_ub, scene.y_lb - pos[1]))
    return out


def _goal_centered(dist: BehaviorDistribution, ego: EgoBoundary, goal, scene: Scene, horizon: float):
    v = (goal[0] - ego.x) / horizon
    return replace(dist, v_mean=float(np.clip(v, scene.v_min, scene.v_max)), y_mean=float(goal[1]))


def run_closed_loop(
    scene: Scene,
    goal,
    planner: PlannerConfig = PlannerConfig(),
    sim: SimConfig = SimConfig(),
    seed: int = 0,
) -> SimLog:
    """Replan every ``replan_dt`` and play the chosen trajectory back kinematically."""
    basis = planner.basis()
    goal = np.asarray(goal, dtype=float)
    ego = scene.ego0
    obs = np.zeros((0, 4)) if scene.obs_state is None else np.array(scene.obs_state, dtype=float)
    lim = {k: getattr(scene, k) for k in ("y_lb", "y_ub", "v_max", "v_min", "a_max", "ell_a", "ell_b")}

    t_log = [0.0]
    ego_log = [[ego.x, ego.y, ego.xd, ego.yd, ego.xdd, ego.ydd]]
    obs_log = [obs[:, :2].copy()]
    viol = sample_violations((ego.x, ego.y), (ego.xd, ego.yd), (ego.xdd, ego.ydd), obs[:, :2], scene)
    viol_log = {k: [viol[k]] for k in VIOLATION_KEYS}
    log = SimLog(t=np.array(t_log), ego=np.array(ego_log), obstacles=np.array(obs_log), violations={})

    t = 0.0
    k_plan = 0
    warm: Optional[BehavioralInput] = None
    n_sub = sim.substeps
    exec_t = sim.sim_dt * np.arange(1, n_sub + 1)
    Wr, Wdr, Wddr = basis.rows_at(exec_t)
    done = False
    while not done and t < sim.max_time - 1e-9:
        cur = Scene.from_obstacle_states(ego, obs, basis.t, **lim)
        plan_scene = cur.with_ellipse_scale(planner.inflation)
        dist = _goal_centered(planner.dist, ego, goal, cur, basis.horizon) if planner.goal_centered else planner.dist
        brake = BehavioralInput(cur.v_min, float(np.clip(ego.y, cur.y_lb, cur.y_ub)))
        warm_list = [brake] if warm is None else [warm, brake]
        out = plan(
            plan_scene,
            basis,
            goal,
            dist,
            planner.refine,
            seed=seed * 100003 + k_plan,
            weights=planner.weights,
            params=planner.params,
            warm_start=warm_list,
            select_weights=planner.select_weights,
            feasible_tol=planner.feasible_tol,
            fixed=[brake],
        )
        xi = out.result.xi_proj
        n = basis.n_coeffs
        cx, cy = xi[:n], xi[n:]
        log.plan_times.append(t)
        log.plans.append(xi.copy())
        log.inputs.append(out.inputs[out.index].p.copy())
        log.endpoints.append(np.array([basis.W[-1] @ cx, basis.W[-1] @ cy]))
        log.converged.append(bool(out.result.converged))
        warm = out.inputs[out.index]
        k_plan += 1

        for j in range(n_sub):
            t_j = round(t + exec_t[j], 10)
            pos = (float(Wr[j] @ cx), float(Wr[j] @ cy))
            vel = (float(Wdr[j] @ cx), float(Wdr[j] @ cy))
            acc = (float(Wddr[j] @ cx), float(Wddr[j] @ cy))
            o = obs[:, :2] + exec_t[j] * obs[:, 2:4]
            v = sample_violations(pos, vel, acc, o, scene)
            t_log.append(t_j)
            ego_log.append([*pos, *vel, *acc])
            obs_log.append(o)
            for key in VIOLATION_KEYS:
                viol_log[key].append(v[key])
            if v["collision"] > 0:
                log.outcome, done = "collision", True
            elif math.hypot(pos[0] - goal[0], pos[1] - goal[1]) <= sim.success_radius:
                log.outcome, done = "success", True
            if done or t_j >= sim.max_time - 1e-9:
                break
        steps_done = j + 1
        dt_exec = exec_t[j]
        pos, vel, acc = ego_log[-1][0:2], ego_log[-1][2:4], ego_log[-1][4:6]
        ego = EgoBoundary(x=pos[0], xd=vel[0], xdd=acc[0], y=pos[1], yd=vel[1], ydd=acc[1])
        obs = obs.copy()
        obs[:, 0:2] += dt_exec * obs[:, 2:4]
        t = t_log[-1]
        if steps_done < n_sub:
            break

    log.t = np.array(t_log)
    log.ego = np.array(ego_log)
    log.obstacles = np.array(obs_log).reshape(len(t_log), -1, 2)
    log.violations = {k: np.array(v) for k, v in viol_log.items()}
    return log


def compute_metrics(log: SimLog, goal, sim: SimConfig = SimConfig()) -> Metrics:
    if len(log) == 0:
        raise EmptyLog("simulation log has no samples")
    goal = np.asarray(goal, dtype=float)
    dists = np.hypot(log.ego[:, 0] - goal[0], log.ego[:, 1] - goal[1])
    if log.endpoints:
        ends = np.array(log.endpoints)
        min_fde = float(np.min(np.hypot(ends[:, 0] - goal[0], ends[:, 1] - goal[1])))
    else:
        min_fde = float(dists[-1])
    success = bool(dists[-1] <= sim.success_radius)
    hit = np.flatnonzero(dists <= sim.success_radius)
    return Metrics(
        min_fde=min_fde,
        smoothness=float(np.mean(np.hypot(log.ego[:, 4], log.ego[:, 5]))),
        success=success,
        collision=bool(np.any(log.violations["collision"] > 0)),
        time_to_goal=float(log.t[hit[0]]) if success and hit.size else None,
    )


# ------------------------------------------------------------------ corpus


def _fixed_setpoint_rollouts(scene: Scene, goal, P: np.ndarray, basis: BasisSet, sim: SimConfig, weights):
    """Closed-loop rollouts that replan the setpoint QP with fixed ``P`` rows.

    Returns a mask of rows that reach the goal without violating any limit.
    """
    qp = build_qp(basis, weights, BehavioralInput(0.0, 0.0), scene.ego0)
    kkt = KktSolver.factor(qp.Q, qp.A)
    Bn = len(P)
    n = basis.n_coeffs
    state = np.tile(scene.ego0.vector, (Bn, 1))  # x, xd, xdd, y, yd, ydd
    obs = np.zeros((0, 4)) if scene.obs_state is None else scene.obs_state
    exec_t = sim.sim_dt * np.arange(1, sim.substeps + 1)
    Wr, Wdr, Wddr = basis.rows_at(exec_t)
    alive = np.ones(Bn, dtype=bool)
    reached = np.zeros(Bn, dtype=bool)
    top = -(qp.dq_dp @ P.T)
    t = 0.0
    while t < sim.max_time - 1e-9 and (alive & ~reached).any():
        xi, _ = kkt.solve(top, state.T)
        cx, cy = xi[:n].T, xi[n:].T
        x, y = cx @ Wr.T, cy @ Wr.T
        xd, yd = cx @ Wdr.T, cy @ Wdr.T
        xdd, ydd = cx @ Wddr.T, cy @ Wddr.T
        ok = (np.hypot(xd, yd) <= scene.v_max).all(1) & (np.hypot(xdd, ydd) <= scene.a_max).all(1)
        ok &= ((y <= scene.y_ub) & (y >= scene.y_lb)).all(1)
        for i in range(len(obs)):
            ox = obs[i, 0] + (t + exec_t) * obs[i, 2]
            oy = obs[i, 1] + (t + exec_t) * obs[i, 3]
            ok &= ((((x - ox) / scene.ell_a) ** 2 + ((y - oy) / scene.ell_b) ** 2) >= 1.0).all(1)
        near = np.hypot(x - goal[0], y - goal[1]) <= sim.success_radius
        active = alive & ~reached
        alive &= ok | reached
        reached |= active & ok & near.any(1)
        state = np.column_stack([x[:, -1], xd[:, -1], xdd[:, -1], y[:, -1], yd[:, -1], ydd[:, -1]])
        t += sim.replan_dt
    return reached & alive


def certify_reachable(scene: Scene, goal, basis: BasisSet, sim: SimConfig = SimConfig(), weights=SetpointWeights()):
    """Brute-force certificate: some fixed (v_d, y_d) grid point reaches the goal safely."""
    vs = np.arange(1.0, scene.v_max + 1e-9, 1.0)
    ys = np.linspace(scene.y_lb + 0.25, scene.y_ub - 0.25, 13)
    P = np.array([[v, y] for v in vs for y in ys])
    ok = _fixed_setpoint_rollouts(scene, goal, P, basis, sim, weights)
    return bool(ok.any()), P[ok]


def generate_corpus(
    n: int,
    seed: int,
    basis: Optional[BasisSet] = None,
    sim: SimConfig = SimConfig(),
    max_attempts: int = 1000,
) -> list[tuple[Scene, np.ndarray]]:
    """Straight-road scenarios, each certified reachable by a setpoint grid search."""
    if n < 1:
        raise ValueError("n must be >= 1")
    basis = basis or make_basis()
    rng = np.random.default_rng(seed)
    corpus = []
    for i in range(n):
        for _ in range(max_attempts):
            ego = EgoBoundary(x=0.0, xd=float(rng.uniform(2.0, 8.0)), y=float(rng.uniform(-1.0, 1.0)))
            n_obs = int(rng.integers(0, 6))
            obs = np.column_stack(
                [
                    rng.uniform(10.0, 60.0, n_obs),
                    rng.uniform(-1.75, 1.75, n_obs),
                    rng.uniform(0.0, 8.0, n_obs),
                    np.zeros(n_obs),
                ]
            )
            goal = np.array([rng.uniform(20.0, 50.0), rng.uniform(-1.5, 1.5)])
            scene = Scene.from_obstacle_states(ego, obs, basis.t)
            if certify_reachable(scene, goal, basis, sim)[0]:
                corpus.append((scene, goal))
                break
        else:
            raise CorpusGenerationFailed(f"scenario {i} could not be certified in {max_attempts} attempts")
    return corpus


# ----------------------------------------------------------------- output


def log_to_csv(log: SimLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x", "y", "vx", "vy", "ax", "ay", *VIOLATION_KEYS])
    for k in range(len(log)):
        row = [log.t[k], *log.ego[k], *(log.violations[key][k] for key in VIOLATION_KEYS)]
        w.writerow([f"{v:.6f}" for v in row])
    return buf.getvalue()


def log_to_svg(log: SimLog, goal, scene: Scene, width: int = 900, height: int = 240) -> str:
    """Top-down plot: lane bounds, obstacle tracks, executed path and goal."""
    xs = [log.ego[:, 0], np.atleast_1d(goal[0])]
    if log.obstacles.size:
        xs.append(log.obstacles[..., 0].ravel())
    x_lo = min(float(np.min(a)) for a in xs) - 5.0
    x_hi = max(float(np.max(a)) for a in xs) + 5.0
    y_lo, y_hi = scene.y_lb - 3.0, scene.y_ub + 3.0
    sx = (width - 20) / max(x_hi - x_lo, 1e-9)
    sy = (height - 20) / (y_hi - y_lo)

    def px(x, y):
        return 10 + (x - x_lo) * sx, height - 10 - (y - y_lo) * sy

    def poly(pts, style):
        coords = " ".join(f"{a:.2f},{b:.2f}" for a, b in (px(x, y) for x, y in pts))
        return f'<polyline points="{coords}" {style}/>'

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for yb in (scene.y_lb, scene.y_ub):
        parts.append(poly([(x_lo, yb), (x_hi, yb)], 'stroke="gray" stroke-dasharray="6,4" fill="none"'))
    for i in range(log.obstacles.shape[1]):
        parts.append(poly(log.obstacles[:, i, :], 'stroke="firebrick" fill="none" stroke-width="1"'))
        cx, cy = px(*log.obstacles[-1, i])
        parts.append(
            f'<ellipse cx="{cx:.2f}" cy="{cy:.2f}" rx="{scene.ell_a * sx:.2f}" ry="{scene.ell_b * sy:.2f}" '
            'fill="none" stroke="firebrick" stroke-opacity="0.5"/>'
        )
    parts.append(poly(log.ego[:, 0:2], 'stroke="navy" fill="none" stroke-width="2"'))
    gx, gy = px(goal[0], goal[1])
    parts.append(f'<circle cx="{gx:.2f}" cy="{gy:.2f}" r="5" fill="seagreen"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
