"""Behavioral-input sampling, gradient refinement and plan selection."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from .basis import BasisSet
from .errors import EmptyBatch
from .grad import DEFAULT_UNROLL, Pipeline, goal_loss, planner_loss
from .projection import ProjectionParams, ProjectionResult, Scene, project_batch
from .setpoint_qp import BehavioralInput, SetpointWeights, batch_setpoint_solve

MAX_HALVINGS = 5


@dataclass(frozen=True)
class BehaviorDistribution:
    v_mean: float = 6.0
    v_std: float = 2.0
    y_mean: float = 0.0
    y_std: float = 0.75
    num_samples: int = 16

    def __post_init__(self):
        if self.v_std < 0 or self.y_std < 0:
            raise ValueError("standard deviations must be nonnegative")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")


@dataclass(frozen=True)
class RefinementConfig:
    steps: int = 30
    lr: float = 0.05
    loss_weights: tuple = (1.0, 1.0)  # (goal, planner)
    unroll_iters: int = DEFAULT_UNROLL

    def __post_init__(self):
        if self.steps < 0 or not self.lr > 0 or self.unroll_iters < 1:
            raise ValueError("need steps >= 0, lr > 0, unroll_iters >= 1")


def sample_behaviors(dist: BehaviorDistribution, seed: int, scene: Optional[Scene] = None) -> list[BehavioralInput]:
    """Clipped Gaussian setpoints; bounds come from ``scene`` (or its defaults)."""
    lim = {f.name: f.default for f in fields(Scene) if f.name in ("v_min", "v_max", "y_lb", "y_ub")}
    if scene is not None:
        lim = {k: getattr(scene, k) for k in lim}
    rng = np.random.default_rng(seed)
    v = np.clip(rng.normal(dist.v_mean, dist.v_std, dist.num_samples), lim["v_min"], lim["v_max"])
    y = np.clip(rng.normal(dist.y_mean, dist.y_std, dist.num_samples), lim["y_lb"], lim["y_ub"])
    return [BehavioralInput(float(a), float(b)) for a, b in zip(v, y)]


def _clip_box(P: np.ndarray, scene: Scene) -> np.ndarray:
    return np.column_stack([np.clip(P[:, 0], scene.v_min, scene.v_max), np.clip(P[:, 1], scene.y_lb, scene.y_ub)])


@dataclass
class RefinementTrace:
    inputs: list
    loss_before: np.ndarray
    loss_after: np.ndarray
    history: list = field(default_factory=list)  # (B,) loss per step


def refine_behaviors(
    batch: Sequence[BehavioralInput],
    scene: Scene,
    basis: BasisSet,
    goal,
    cfg: RefinementConfig = RefinementConfig(),
    weights: SetpointWeights = SetpointWeights(),
    params: ProjectionParams = ProjectionParams(),
    trace: bool = False,
):
    """Projected gradient descent on the combined loss of the unrolled pipeline.

    Every member keeps its step only if the loss does not increase; otherwise
    the step is halved up to ``MAX_HALVINGS`` times and finally dropped.
    """
    batch = list(batch)
    if not batch:
        raise EmptyBatch("nothing to refine")
    if cfg.steps == 0:
        return (batch, None) if trace else batch
    template = batch[0]
    pipe = Pipeline.build(basis, scene, weights, params, BehavioralInput(0.0, 0.0, template.p_term, template.partial))
    P = np.array([b.p for b in batch])
    lw = cfg.loss_weights
    loss, grad, *_ = pipe.loss_and_grad(P, goal, cfg.unroll_iters, lw, scene)
    loss0 = loss.copy()
    history = [loss.copy()]
    for _ in range(cfg.steps):
        step = np.full(len(P), cfg.lr)
        pending = np.ones(len(P), dtype=bool)
        newP = P.copy()
        for _ in range(MAX_HALVINGS + 1):
            trial = _clip_box(P - step[:, None] * grad, scene)
            tl, *_ = pipe.loss_terms(pipe.forward(trial, cfg.unroll_iters), goal, lw, scene)
            ok = pending & (tl <= loss)
            newP[ok] = trial[ok]
            pending &= ~ok
            if not pending.any():
                break
            step = np.where(pending, 0.5 * step, step)
        moved = np.any(newP != P, axis=1)
        if not moved.any():
            break
        P = newP
        loss, grad, *_ = pipe.loss_and_grad(P, goal, cfg.unroll_iters, lw, scene)
        history.append(loss.copy())
    out = [b.with_p(p) for b, p in zip(batch, P)]
    if trace:
        return out, RefinementTrace(out, loss0, loss, history)
    return out


def combined_losses(xis: np.ndarray, scene: Scene, basis: BasisSet, goal, loss_weights=(1.0, 1.0)):
    gl = goal_loss(xis, basis, goal)
    pl = planner_loss(xis, scene, basis)
    return loss_weights[0] * gl + loss_weights[1] * pl, gl, pl


def select_best(
    results: Sequence[ProjectionResult],
    goal,
    scene: Scene,
    basis: BasisSet,
    loss_weights=(1.0, 1.0),
) -> tuple[int, ProjectionResult]:
    """Lowest combined loss; ties go to the lower planner loss, then the lower index."""
    if len(results) == 0:
        raise EmptyBatch("no candidate plans")
    xis = np.array([r.xi_proj for r in results])
    total, _, pl = combined_losses(xis, scene, basis, goal, loss_weights)
    order = np.lexsort((np.arange(len(results)), pl, total))
    k = int(order[0])
    return k, results[k]


@dataclass
class PlanOutcome:
    index: int
    result: ProjectionResult
    inputs: list
    results: list
    total_loss: float
    goal_loss: float
    planner_loss: float


def plan(
    scene: Scene,
    basis: BasisSet,
    goal,
    dist: BehaviorDistribution = BehaviorDistribution(),
    cfg: RefinementConfig = RefinementConfig(),
    seed: int = 0,
    weights: SetpointWeights = SetpointWeights(),
    params: ProjectionParams = ProjectionParams(),
    warm_start: Optional[Sequence[BehavioralInput]] = None,
    select_weights=None,
    feasible_tol: Optional[float] = None,
    fixed: Optional[Sequence[BehavioralInput]] = None,
) -> PlanOutcome:
    """Sample, refine, project and select one open-loop plan.

    With ``feasible_tol`` set, candidates whose worst violation is within it
    are preferred over all others whenever at least one exists. ``fixed``
    candidates join the batch after refinement, unchanged.
    """
    inputs = sample_behaviors(dist, seed, scene)
    if warm_start:
        inputs = list(warm_start) + inputs[: max(0, dist.num_samples - len(warm_start))]
    inputs = refine_behaviors(inputs, scene, basis, goal, cfg, weights, params) + list(fixed or [])
    xis = batch_setpoint_solve(basis, weights, inputs, scene.ego0)
    results = project_batch(xis, scene, basis, params)
    sw = cfg.loss_weights if select_weights is None else select_weights
    pool = list(range(len(results)))
    if feasible_tol is not None:
        pool = [i for i in pool if max(results[i].max_violation.values()) <= feasible_tol] or pool
    j, best = select_best([results[i] for i in pool], goal, scene, basis, sw)
    k = pool[j]
    _, gl, pl = combined_losses(best.xi_proj, scene, basis, goal, (1.0, 1.0))
    total = sw[0] * gl + sw[1] * pl
    return PlanOutcome(k, best, inputs, results, float(total), float(gl), float(pl))
