"""Losses and unrolled derivatives of the setpoint-solve -> projection pipeline.

Derivatives are propagated in forward mode: tangent columns ride along with
the primal iterate through a fixed number of AM sweeps, reusing the same two
KKT factorizations as the forward pass. Everything is batch-first so a whole
set of behavioral inputs can be differentiated at once.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .basis import BasisSet, eval_traj
from .errors import KinkWarning
from .projection import (
    KktFactor,
    ProjectionParams,
    Scene,
    StackedConstraints,
    relax_schedule,
    select_obstacles,
    stack_constraints,
)
from .setpoint_qp import (
    BehavioralInput,
    KktSolver,
    SetpointWeights,
    build_qp,
    setpoint_jacobian_rhs,
)

DEFAULT_UNROLL = 50
KINK_TOL = 1e-6


# ---------------------------------------------------------------- losses


def goal_loss(xi: np.ndarray, basis: BasisSet, goal) -> np.ndarray:
    """Squared distance between the trajectory endpoint and ``goal``."""
    smp = eval_traj(basis, xi)
    g = np.asarray(goal, dtype=float)
    return (smp.x[..., -1] - g[0]) ** 2 + (smp.y[..., -1] - g[1]) ** 2


def goal_loss_grad(xi: np.ndarray, basis: BasisSet, goal) -> np.ndarray:
    smp = eval_traj(basis, xi)
    g = np.asarray(goal, dtype=float)
    ex = 2.0 * (smp.x[..., -1] - g[0])
    ey = 2.0 * (smp.y[..., -1] - g[1])
    w_end = basis.W[-1]
    return np.concatenate([ex[..., None] * w_end, ey[..., None] * w_end], axis=-1)


def constraint_values(xi: np.ndarray, scene: Scene, basis: BasisSet) -> tuple[np.ndarray, np.ndarray]:
    """Stacked inequality values ``g(xi) <= 0`` and their Jacobian ``dg/dxi``.

    Rows: collision (per obstacle and sample), speed, acceleration, upper lane,
    lower lane. Shapes ``(..., K)`` and ``(..., K, 2n)``.
    """
    xi = np.asarray(xi, dtype=float)
    smp = eval_traj(basis, xi)
    W, Wd, Wdd = basis.W, basis.Wd, basis.Wdd
    n = basis.n_coeffs
    lead = xi.shape[:-1]
    blocks, jacs = [], []

    def stack_xy(cx_w, cy_w):
        return np.concatenate([cx_w, cy_w], axis=-1)

    if scene.n_obs:
        dx = smp.x[..., None, :] - scene.obs_x  # (..., N, m)
        dy = smp.y[..., None, :] - scene.obs_y
        g = 1.0 - (dx / scene.ell_a) ** 2 - (dy / scene.ell_b) ** 2
        gx = -2.0 * dx / scene.ell_a**2
        gy = -2.0 * dy / scene.ell_b**2
        J = stack_xy(gx[..., None] * W, gy[..., None] * W)  # (..., N, m, 2n)
        blocks.append(g.reshape(lead + (-1,)))
        jacs.append(J.reshape(lead + (-1, 2 * n)))

    for (u, v), mat, lim in (((smp.xd, smp.yd), Wd, scene.v_max), ((smp.xdd, smp.ydd), Wdd, scene.a_max)):
        mag = np.hypot(u, v)
        safe = np.where(mag > 0, mag, 1.0)
        blocks.append(mag - lim)
        jacs.append(stack_xy((u / safe)[..., None] * mat, (v / safe)[..., None] * mat))

    zero = np.zeros(lead + (basis.m, n))
    blocks.append(smp.y - scene.y_ub)
    jacs.append(np.concatenate([zero, np.broadcast_to(W, lead + W.shape)], axis=-1))
    blocks.append(scene.y_lb - smp.y)
    jacs.append(np.concatenate([zero, np.broadcast_to(-W, lead + W.shape)], axis=-1))
    return np.concatenate(blocks, axis=-1), np.concatenate(jacs, axis=-2)


def planner_loss(xi: np.ndarray, scene: Scene, basis: BasisSet) -> np.ndarray:
    """L2 norm of the hinge violations of all sampled inequality constraints."""
    g, _ = constraint_values(xi, scene, basis)
    return np.linalg.norm(np.maximum(0.0, g), axis=-1)


def planner_loss_grad(xi: np.ndarray, scene: Scene, basis: BasisSet) -> np.ndarray:
    g, J = constraint_values(xi, scene, basis)
    h = np.maximum(0.0, g)
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    # Subgradient 0 at the feasible set.
    coef = np.where(norm > 0, h / np.where(norm > 0, norm, 1.0), 0.0)
    return np.einsum("...k,...kn->...n", coef, J)


# ------------------------------------------------------- unrolled pipeline


@dataclass(frozen=True)
class PipelineJacobian:
    d_xi_d_p: np.ndarray
    d_xi_d_term: Optional[np.ndarray]
    d_xi_d_partial: Optional[np.ndarray]
    unroll_iters: int
    xi: np.ndarray  # unrolled output the Jacobian belongs to
    smooth: bool = True

    @property
    def full(self) -> np.ndarray:
        blocks = [b for b in (self.d_xi_d_p, self.d_xi_d_term, self.d_xi_d_partial) if b is not None]
        return np.hstack(blocks)


@dataclass(frozen=True)
class LossReport:
    goal_loss: float
    planner_loss: float
    grad_p: np.ndarray
    grad_term: Optional[np.ndarray] = None
    grad_partial: Optional[np.ndarray] = None
    smooth: bool = True

    @property
    def total(self) -> float:
        return self.goal_loss + self.planner_loss


def _polar_tangent(u, v, du, dv, cu, cv, sa, sb, lo, hi):
    """Value and tangent of the polar map (u, v) -> e(alpha, clip(r)).

    Returns ``(eu, ev, deu, dev, kink)``; ``kink`` flags members within
    ``KINK_TOL`` of a clip boundary.
    """
    U = (u - cu) / sa
    V = (v - cv) / sb
    r = np.hypot(U, V)
    d = np.clip(r, lo, hi)
    alpha = np.arctan2(V, U)
    eu = cu + sa * d * np.cos(alpha)
    ev = cv + sb * d * np.sin(alpha)

    clipped = (r < lo) | (r > hi)
    c = np.where(r < lo, lo, hi)
    r3 = np.where(r > 0, r**3, 1.0)
    Uk, Vk, ck, r3k = (a[..., None] for a in (U, V, c, r3))
    dU, dV = du / sa, dv / sb
    cross = Vk * dU - Uk * dV
    deu_c = sa * ck * Vk * cross / r3k
    dev_c = -sb * ck * Uk * cross / r3k
    ck_ = clipped[..., None]
    deu = np.where(ck_, deu_c, du)
    dev = np.where(ck_, dev_c, dv)

    near = np.abs(r - hi) < KINK_TOL
    if np.any(np.asarray(lo) > 0):
        near |= np.abs(r - lo) < KINK_TOL
    kink = near.reshape(near.shape[0], -1).any(axis=1)
    return eu, ev, deu, dev, kink


@dataclass(frozen=True)
class Pipeline:
    """Pre-factored setpoint and projection solves for one scene and equality structure."""

    basis: BasisSet
    scene: Scene
    weights: SetpointWeights
    params: ProjectionParams
    template: BehavioralInput
    qp_kkt: KktSolver
    dq_dp: np.ndarray
    jac_rhs: dict
    A: np.ndarray
    b: np.ndarray
    sc: StackedConstraints
    kkt: KktFactor

    @classmethod
    def build(
        cls,
        basis: BasisSet,
        scene: Scene,
        weights: SetpointWeights = SetpointWeights(),
        params: ProjectionParams = ProjectionParams(),
        template: Optional[BehavioralInput] = None,
    ) -> "Pipeline":
        template = template or BehavioralInput(0.0, 0.0)
        scene = select_obstacles(scene, params.max_obstacles, params.obstacle_range)
        qp = build_qp(basis, weights, template, scene.ego0)
        qp_kkt = KktSolver.factor(qp.Q, qp.A)
        sc = stack_constraints(scene, basis, params.d_big)
        kkt = KktFactor.build(sc, qp.A, params.rho)
        jac = setpoint_jacobian_rhs(basis, qp, template)
        return cls(basis, scene, weights, params, template, qp_kkt, qp.dq_dp, jac, qp.A, qp.b, sc, kkt)

    @property
    def n2(self) -> int:
        return 2 * self.basis.n_coeffs

    def input_blocks(self) -> list[tuple[str, int]]:
        out = [("p", 2)]
        if self.template.p_term is not None:
            out.append(("p_term", 4))
        if self.template.partial is not None:
            out.append(("partial", len(self.template.partial.indices)))
        return out

    def setpoint(self, P: np.ndarray, with_all_inputs: bool = False):
        """Setpoint solutions for rows of ``P = (v_d, y_d)`` and their tangents.

        Tangent columns cover ``p`` only, or every input block when
        ``with_all_inputs`` (batch of one).
        """
        P = np.atleast_2d(np.asarray(P, dtype=float))
        Bn = P.shape[0]
        top = -(self.dq_dp @ P.T)
        bs = np.repeat(self.b[:, None], Bn, axis=1)
        xi, _ = self.qp_kkt.solve(top, bs)
        xi = xi.T
        keys = [k for k, _ in self.input_blocks()] if with_all_inputs else ["p"]
        rhs = np.hstack([self.jac_rhs[k] for k in keys])  # (n2 + rows, K)
        dxi, _ = self.qp_kkt.solve(rhs[: self.n2], rhs[self.n2 :])
        db = rhs[self.n2 :]
        K = rhs.shape[1]
        return (
            xi,
            np.broadcast_to(dxi, (Bn, self.n2, K)).copy(),
            np.broadcast_to(self.b, (Bn, self.b.size)).copy(),
            np.broadcast_to(db, (Bn,) + db.shape).copy(),
        )

    def _e_and_tangent(self, xi, dxi):
        sc, scene = self.sc, self.scene
        z = xi @ sc.F.T
        dz = np.matmul(sc.F, dxi)
        blk, dblk = sc.split(z), sc.split(np.moveaxis(dz, -1, 0))
        dblk = {k: np.moveaxis(v, 0, -1) for k, v in dblk.items()}
        No = sc.n_obs * sc.m
        parts = []
        kinks = []
        specs = (
            ("ox", "oy", sc.x_o, sc.y_o, sc.ell_a, sc.ell_b, 1.0, sc.d_max[:No]),
            ("vx", "vy", 0.0, 0.0, 1.0, 1.0, scene.v_min, scene.v_max),
            ("ax", "ay", 0.0, 0.0, 1.0, 1.0, 0.0, scene.a_max),
        )
        for ku, kv, cu, cv, sa, sb, lo, hi in specs:
            parts.append(_polar_tangent(blk[ku], blk[kv], dblk[ku], dblk[kv], cu, cv, sa, sb, lo, hi))
            kinks.append(parts[-1][4])
        g = blk["lane"]
        inside = g < sc.y_lane
        e_lane = np.minimum(g, sc.y_lane)
        de_lane = np.where(inside[..., None], dblk["lane"], 0.0)
        kinks.append((np.abs(g - sc.y_lane) < KINK_TOL).any(axis=1))
        (eox, eoy, deox, deoy, _), (evx, evy, devx, devy, _), (eax, eay, deax, deay, _) = parts
        e = np.concatenate([eox, evx, eax, eoy, evy, eay, e_lane], axis=-1)
        de = np.concatenate([deox, devx, deax, deoy, devy, deay, de_lane], axis=-2)
        return z, dz, e, de, np.any(kinks, axis=0)

    def unroll(self, xi_star, dxi_star, b, db, iters: int):
        """Run exactly ``iters`` AM sweeps from ``xi_star`` carrying tangents.

        Shapes: ``xi_star (B, 2n)``, ``dxi_star (B, 2n, K)``, ``b (B, k)``,
        ``db (B, k, K)``. Returns ``(xi, dxi, kink)``.
        """
        rho = self.params.rho
        FtW = self.sc.FtW
        n2 = self.n2
        Bn, _, K = dxi_star.shape
        xi, dxi = xi_star.copy(), dxi_star.copy()
        lam = np.zeros_like(xi)
        dlam = np.zeros_like(dxi)
        _, _, e_old, de_old, kink = self._e_and_tangent(xi, dxi)
        omega = np.full(Bn, self.params.relax)
        best = np.full(Bn, np.inf)
        for _ in range(iters):
            z, dz, e_new, de_new, k_now = self._e_and_tangent(xi, dxi)
            kink |= k_now
            omega, best = relax_schedule(np.linalg.norm(z - e_new, axis=-1), best, omega, self.params)
            lam = lam - rho * (z - e_old) @ FtW.T
            dlam = dlam - rho * np.matmul(FtW, dz - de_old)
            top = xi_star + lam + rho * e_new @ FtW.T
            dtop = dxi_star + dlam + rho * np.matmul(FtW, de_new)
            # Primal and tangent right-hand sides share one factorization.
            cols_top = np.concatenate([top.T, dtop.transpose(1, 0, 2).reshape(n2, Bn * K)], axis=1)
            cols_b = np.concatenate([b.T, db.transpose(1, 0, 2).reshape(b.shape[1], Bn * K)], axis=1)
            sol, _ = self.kkt.solver.solve(cols_top, cols_b)
            xq = sol[:, :Bn].T
            dxq = sol[:, Bn:].reshape(n2, Bn, K).transpose(1, 0, 2)
            xi = xi + omega[:, None] * (xq - xi)
            dxi = dxi + omega[:, None, None] * (dxq - dxi)
            e_old, de_old = e_new, de_new
        return xi, dxi, kink

    def forward(self, P: np.ndarray, iters: int) -> np.ndarray:
        """Unrolled pipeline output for rows of ``P`` (no tangents)."""
        xi, dxi, b, db = self.setpoint(P)
        out, _, _ = self.unroll(xi, dxi[..., :0], b, db[..., :0], iters)
        return out

    def loss_terms(self, xi: np.ndarray, goal, loss_weights=(1.0, 1.0), scene: Optional[Scene] = None):
        scene = scene if scene is not None else self.scene
        gl = goal_loss(xi, self.basis, goal)
        pl = planner_loss(xi, scene, self.basis)
        return loss_weights[0] * gl + loss_weights[1] * pl, gl, pl

    def loss_and_grad(self, P: np.ndarray, goal, iters: int, loss_weights=(1.0, 1.0), scene: Optional[Scene] = None):
        """Combined loss and its gradient w.r.t. ``P`` for every row of ``P``."""
        scene = scene if scene is not None else self.scene
        xi_s, dxi_s, b, db = self.setpoint(P)
        xi, dxi, kink = self.unroll(xi_s, dxi_s, b, db, iters)
        total, gl, pl = self.loss_terms(xi, goal, loss_weights, scene)
        g_xi = loss_weights[0] * goal_loss_grad(xi, self.basis, goal) + loss_weights[1] * planner_loss_grad(
            xi, scene, self.basis
        )
        grad = np.matmul(g_xi[:, None, :], dxi)[:, 0, :]
        return total, grad, gl, pl, xi, kink


def _inputs_vector(p: BehavioralInput) -> np.ndarray:
    parts = [p.p]
    if p.p_term is not None:
        parts.append(p.p_term)
    if p.partial is not None:
        parts.append(p.partial.values)
    return np.concatenate(parts)


def _with_inputs(p: BehavioralInput, vec: np.ndarray) -> BehavioralInput:
    from .setpoint_qp import PartialSolution

    v_d, y_d = vec[0], vec[1]
    k = 2
    term = None
    if p.p_term is not None:
        term = vec[k : k + 4]
        k += 4
    partial = None
    if p.partial is not None:
        partial = PartialSolution(p.partial.indices, vec[k:])
    return BehavioralInput(float(v_d), float(y_d), term, partial)


def _single_unrolled(p: BehavioralInput, pipe: Pipeline, iters: int, tangents: bool):
    """Unrolled output for one input with all equality data taken from ``p``."""

    qp = build_qp(pipe.basis, pipe.weights, p, pipe.scene.ego0)
    xi_s, _ = pipe.qp_kkt.solve(-qp.q[:, None], qp.b[:, None])
    xi_s = xi_s.T
    b = qp.b[None, :]
    if tangents:
        rhs = np.hstack([pipe.jac_rhs[k] for k, _ in pipe.input_blocks()])
        dxi_s, _ = pipe.qp_kkt.solve(rhs[: pipe.n2], rhs[pipe.n2 :])
        dxi_s, db = dxi_s[None], rhs[pipe.n2 :][None]
    else:
        dxi_s = np.zeros((1, pipe.n2, 0))
        db = np.zeros((1, b.shape[1], 0))
    return pipe.unroll(xi_s, dxi_s, b, db, iters)


def pipeline_jacobian(
    p: BehavioralInput,
    scene: Scene,
    basis: BasisSet,
    weights: SetpointWeights = SetpointWeights(),
    params: ProjectionParams = ProjectionParams(),
    unroll_iters: int = DEFAULT_UNROLL,
) -> PipelineJacobian:
    """Jacobian of the unrolled output w.r.t. ``(v_d, y_d)``, ``p_term`` and the partial values."""
    pipe = Pipeline.build(basis, scene, weights, params, p)
    xi, dxi, kink = _single_unrolled(p, pipe, unroll_iters, tangents=True)
    if kink[0]:
        warnings.warn(KinkWarning("unrolled iterate passed within 1e-6 of a clip or hinge boundary"), stacklevel=2)
    J = dxi[0]
    blocks, k = {}, 0
    for name, size in pipe.input_blocks():
        blocks[name] = J[:, k : k + size]
        k += size
    return PipelineJacobian(
        d_xi_d_p=blocks["p"],
        d_xi_d_term=blocks.get("p_term"),
        d_xi_d_partial=blocks.get("partial"),
        unroll_iters=unroll_iters,
        xi=xi[0],
        smooth=not bool(kink[0]),
    )


def unrolled_output(
    p: BehavioralInput,
    scene: Scene,
    basis: BasisSet,
    weights: SetpointWeights = SetpointWeights(),
    params: ProjectionParams = ProjectionParams(),
    unroll_iters: int = DEFAULT_UNROLL,
) -> np.ndarray:
    pipe = Pipeline.build(basis, scene, weights, params, p)
    xi, _, _ = _single_unrolled(p, pipe, unroll_iters, tangents=False)
    return xi[0]


def finite_difference_jacobian(
    p: BehavioralInput,
    scene: Scene,
    basis: BasisSet,
    weights: SetpointWeights = SetpointWeights(),
    params: ProjectionParams = ProjectionParams(),
    unroll_iters: int = DEFAULT_UNROLL,
    eps: float = 1e-5,
) -> np.ndarray:
    """Central differences of the unrolled output over the full input vector."""
    pipe = Pipeline.build(basis, scene, weights, params, p)
    x0 = _inputs_vector(p)
    cols = []
    for k in range(x0.size):
        step = np.zeros_like(x0)
        step[k] = eps
        hi = _single_unrolled(_with_inputs(p, x0 + step), pipe, unroll_iters, False)[0][0]
        lo = _single_unrolled(_with_inputs(p, x0 - step), pipe, unroll_iters, False)[0][0]
        cols.append((hi - lo) / (2.0 * eps))
    return np.stack(cols, axis=1)


def relative_error(J: np.ndarray, J_ref: np.ndarray) -> float:
    """Largest column-wise relative error ``|J_k - R_k| / |R_k|`` (2-norms)."""
    num = np.linalg.norm(J - J_ref, axis=0)
    den = np.maximum(np.linalg.norm(J_ref, axis=0), 1e-12)
    return float(np.max(num / den)) if J.size else 0.0


def gradcheck(
    p: BehavioralInput,
    scene: Scene,
    basis: BasisSet,
    weights: SetpointWeights = SetpointWeights(),
    params: ProjectionParams = ProjectionParams(),
    unroll_iters: int = DEFAULT_UNROLL,
    eps: float = 1e-5,
) -> tuple[dict, bool]:
    """Per-block relative error of the unrolled Jacobian and the smoothness flag."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", KinkWarning)
        jac = pipeline_jacobian(p, scene, basis, weights, params, unroll_iters)
    fd = finite_difference_jacobian(p, scene, basis, weights, params, unroll_iters, eps)
    errs, k = {}, 0
    for name, blk in (("p", jac.d_xi_d_p), ("p_term", jac.d_xi_d_term), ("partial", jac.d_xi_d_partial)):
        if blk is None:
            continue
        errs[name] = relative_error(blk, fd[:, k : k + blk.shape[1]])
        k += blk.shape[1]
    return errs, jac.smooth


def loss_gradients(
    p: BehavioralInput,
    scene: Scene,
    basis: BasisSet,
    goal,
    weights: SetpointWeights = SetpointWeights(),
    params: ProjectionParams = ProjectionParams(),
    unroll_iters: int = DEFAULT_UNROLL,
    loss_weights: tuple[float, float] = (1.0, 1.0),
) -> LossReport:
    """Combined-loss gradients chained through the unrolled Jacobian."""
    jac = pipeline_jacobian(p, scene, basis, weights, params, unroll_iters)
    xi = jac.xi
    gl = float(goal_loss(xi, basis, goal))
    pl = float(planner_loss(xi, scene, basis))
    g_xi = loss_weights[0] * goal_loss_grad(xi, basis, goal) + loss_weights[1] * planner_loss_grad(xi, scene, basis)
    return LossReport(
        goal_loss=gl,
        planner_loss=pl,
        grad_p=g_xi @ jac.d_xi_d_p,
        grad_term=None if jac.d_xi_d_term is None else g_xi @ jac.d_xi_d_term,
        grad_partial=None if jac.d_xi_d_partial is None else g_xi @ jac.d_xi_d_partial,
        smooth=jac.smooth,
    )
