"""Batched, differentiable Frenet-frame trajectory planning."""

from .basis import BasisSet, eval_traj, make_basis
from .behavior import BehaviorDistribution, RefinementConfig, plan, refine_behaviors, sample_behaviors, select_best
from .errors import *  # noqa: F401,F403
from .frenet import build_centerline, to_frenet, to_global
from .grad import goal_loss, loss_gradients, pipeline_jacobian, planner_loss
from .projection import ProjectionParams, Scene, project, project_batch
from .setpoint_qp import BehavioralInput, EgoBoundary, SetpointWeights, build_qp, solve_eq_qp, solve_setpoint
from .sim import PlannerConfig, SimConfig, compute_metrics, generate_corpus, run_closed_loop

__version__ = "0.1.0"
