"""Augmented-Lagrangian alternating-minimization projection.

A setpoint-QP solution ``xi*`` is moved minimally onto the set described by
collision ellipses, speed/acceleration bounds and lane bounds. Each
non-convex constraint is written in polar form ``F xi = e(alpha, d)`` with
simple bounds on ``d``; lane bounds become ``G xi - y_lane + s = 0``,
``s >= 0``. Every AM sweep is closed form except the ``xi`` step, which is an
equality-constrained QP with a constant KKT matrix, factored once and shared
by all members of a batch.

Arrays are batch-first: a coefficient batch has shape ``(B, 2n)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .basis import BasisSet, eval_traj
from .errors import DimensionMismatch
from .setpoint_qp import EgoBoundary, KktSolver

D_BIG = 1e6


@dataclass(frozen=True)
class Scene:
    ego0: EgoBoundary
    obs_x: np.ndarray  # (N, m) predicted obstacle x on the planning grid
    obs_y: np.ndarray  # (N, m)
    y_lb: float = -1.75
    y_ub: float = 1.75
    v_max: float = 10.0
    v_min: float = 0.01
    a_max: float = 4.0
    ell_a: float = 5.0
    ell_b: float = 2.5
    # (N, 4) rows of (x, y, vx, vy) at t=0, kept for constant-velocity propagation.
    obs_state: Optional[np.ndarray] = field(default=None, repr=False)
    # Planning grid the obstacle samples were generated on.
    t_grid: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        ox = np.asarray(self.obs_x, dtype=float)
        if ox.ndim == 1:
            ox = ox.reshape(1, -1) if ox.size else ox.reshape(0, 0)
        oy = np.asarray(self.obs_y, dtype=float).reshape(ox.shape)
        object.__setattr__(self, "obs_x", ox)
        object.__setattr__(self, "obs_y", oy)
        if not self.y_lb < self.y_ub:
            raise ValueError("lane bounds need y_lb < y_ub")
        if not 0 <= self.v_min < self.v_max:
            raise ValueError("need 0 <= v_min < v_max")
        if not (self.a_max > 0 and self.ell_a > 0 and self.ell_b > 0):
            raise ValueError("a_max and ellipse axes must be positive")

    @property
    def n_obs(self) -> int:
        return self.obs_x.shape[0]

    @classmethod
    def from_obstacle_states(cls, ego0: EgoBoundary, states, t_grid: np.ndarray, **kw) -> "Scene":
        st = np.asarray(states, dtype=float).reshape(-1, 4)
        t = np.asarray(t_grid, dtype=float)
        ox = st[:, 0:1] + st[:, 2:3] * t[None, :]
        oy = st[:, 1:2] + st[:, 3:4] * t[None, :]
        return cls(ego0=ego0, obs_x=ox, obs_y=oy, obs_state=st, t_grid=t, **kw)

    def with_ellipse_scale(self, factor: float) -> "Scene":
        return replace(self, ell_a=self.ell_a * factor, ell_b=self.ell_b * factor)


@dataclass(frozen=True)
class ProjectionParams:
    rho: float = 10.0
    max_iters: int = 100
    tol: float = 1e-3
    d_big: float = D_BIG
    max_obstacles: int = 5
    obstacle_range: float = 50.0
    # Over-relaxation of the xi step; 1.0 gives the plain alternating sweep.
    relax: float = 1.9
    # A member whose residual exceeds this multiple of its best residual so far
    # backs off towards the plain sweep (over-relaxation can be unstable).
    diverge_factor: float = 100.0

    def __post_init__(self):
        if self.rho <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise ValueError("need rho > 0, max_iters >= 1, tol > 0")
        if not 0.0 < self.relax < 2.0:
            raise ValueError("relax must lie in (0, 2)")
        if self.d_big <= 1.0:
            raise ValueError("d_big must exceed 1")
        if self.diverge_factor <= 1.0:
            raise ValueError("diverge_factor must exceed 1")


def relax_schedule(res, best, omega, params: ProjectionParams):
    """Per-member relaxation after observing residuals ``res``; returns ``(omega, best)``.

    A member whose residual blows past ``diverge_factor`` times its best so far
    has its over-relaxation excess halved.
    """
    omega = np.where(res > params.diverge_factor * best, 1.0 + 0.5 * (omega - 1.0), omega)
    return omega, np.minimum(best, res)


def select_obstacles(scene: Scene, max_count: int = 5, max_range: float = 50.0) -> Scene:
    """Keep the ``max_count`` nearest obstacles within ``max_range`` of the ego at t=0."""
    if scene.n_obs == 0:
        return scene
    dist = np.hypot(scene.obs_x[:, 0] - scene.ego0.x, scene.obs_y[:, 0] - scene.ego0.y)
    order = np.argsort(dist, kind="stable")
    keep = np.sort(order[dist[order] <= max_range][:max_count])
    state = scene.obs_state[keep] if scene.obs_state is not None else None
    return replace(scene, obs_x=scene.obs_x[keep], obs_y=scene.obs_y[keep], obs_state=state)


@dataclass(frozen=True)
class StackedConstraints:
    n: int  # coefficients per axis
    m: int
    n_obs: int
    F_o: np.ndarray  # (N m, n)
    F_tilde: np.ndarray  # (2 (N m + 2 m), 2n)
    G: np.ndarray  # (2m, 2n)
    y_lane: np.ndarray  # (2m,)
    F: np.ndarray  # (R, 2n)
    row_weight: np.ndarray  # (R,) penalty weights
    x_o: np.ndarray  # (N m,)
    y_o: np.ndarray  # (N m,)
    d_min: np.ndarray
    d_max: np.ndarray
    ell_a: float
    ell_b: float
    FtW: np.ndarray = field(repr=False)  # F^T diag(row_weight)

    # Row offsets into F / e.
    @property
    def n_block(self) -> int:
        return self.n_obs * self.m + 2 * self.m

    @property
    def n_rows(self) -> int:
        return self.F.shape[0]

    def split(self, z: np.ndarray):
        """Split stacked rows ``(..., R)`` into named sample blocks."""
        No, m, nb = self.n_obs * self.m, self.m, self.n_block
        return {
            "ox": z[..., :No],
            "vx": z[..., No : No + m],
            "ax": z[..., No + m : nb],
            "oy": z[..., nb : nb + No],
            "vy": z[..., nb + No : nb + No + m],
            "ay": z[..., nb + No + m : 2 * nb],
            "lane": z[..., 2 * nb :],
        }


def stack_constraints(scene: Scene, basis: BasisSet, d_big: float = D_BIG) -> StackedConstraints:
    n, m, N = basis.n_coeffs, basis.m, scene.n_obs
    if scene.obs_x.shape != (N, m) and N > 0:
        raise DimensionMismatch(f"obstacle samples must be ({N}, {m}), got {scene.obs_x.shape}")
    F_o = np.tile(basis.W, (N, 1)) if N else np.zeros((0, n))
    Fx = np.vstack([F_o, basis.Wd, basis.Wdd])
    Z = np.zeros_like(Fx)
    F_tilde = np.block([[Fx, Z], [Z, Fx]])
    Zm = np.zeros((m, n))
    G = np.block([[Zm, basis.W], [Zm, -basis.W]])
    # G xi <= y_lane encodes y <= y_ub and -y <= -y_lb.
    y_lane = np.concatenate([np.full(m, scene.y_ub), np.full(m, -scene.y_lb)])
    F = np.vstack([F_tilde, G])
    # Collision rows are weighted so the penalty is isotropic in normalised
    # ellipse coordinates (scaled by ell_a); this makes the alpha/d updates exact.
    # Lane rows get the same lateral weight.
    w = np.ones(F.shape[0])
    nb = N * m + 2 * m
    lat = (scene.ell_a / scene.ell_b) ** 2
    w[nb : nb + N * m] = lat
    w[2 * nb :] = lat
    d_min = np.concatenate([np.ones(N * m), np.full(m, scene.v_min), np.zeros(m)])
    d_max = np.concatenate([np.full(N * m, d_big), np.full(m, scene.v_max), np.full(m, scene.a_max)])
    arrays = dict(
        F_o=F_o,
        F_tilde=F_tilde,
        G=G,
        y_lane=y_lane,
        F=F,
        row_weight=w,
        x_o=scene.obs_x.reshape(-1).copy(),
        y_o=scene.obs_y.reshape(-1).copy(),
        d_min=d_min,
        d_max=d_max,
        FtW=F.T * w[None, :],
    )
    for a in arrays.values():
        a.setflags(write=False)
    return StackedConstraints(n=n, m=m, n_obs=N, ell_a=scene.ell_a, ell_b=scene.ell_b, **arrays)


@dataclass
class ProjectionState:
    alpha_o: np.ndarray
    d_o: np.ndarray
    alpha_v: np.ndarray
    d_v: np.ndarray
    alpha_a: np.ndarray
    d_a: np.ndarray
    lam: np.ndarray
    s: np.ndarray
    e: np.ndarray
    residual_history: list = field(default_factory=list)

    def copy(self) -> "ProjectionState":
        return ProjectionState(
            *(np.array(getattr(self, k)) for k in ("alpha_o", "d_o", "alpha_v", "d_v", "alpha_a", "d_a", "lam", "s", "e")),
            residual_history=list(self.residual_history),
        )


@dataclass(frozen=True)
class KktFactor:
    solver: KktSolver
    rho: float

    @classmethod
    def build(cls, sc: StackedConstraints, A: np.ndarray, rho: float) -> "KktFactor":
        H = np.eye(2 * sc.n) + rho * sc.FtW @ sc.F
        return cls(KktSolver.factor(H, A), rho)


@dataclass
class ProjectionResult:
    xi_proj: np.ndarray
    converged: bool
    iters: int
    final_residual: float
    max_violation: dict
    initial_residual: float = float("nan")
    residual_history: list = field(default_factory=list)


def polar(u, v, sa: float, sb: float, lo, hi):
    """Closed-form (alpha, d) for residual ``(u - sa d cos a, v - sb d sin a)``.

    Returns ``(alpha, r, d)`` with ``r`` the unclipped radius and ``d = clip(r)``.
    ``atan2(0, 0)`` is taken as 0.
    """
    U = u / sa
    V = v / sb
    alpha = np.arctan2(V, U)
    r = np.hypot(U, V)
    return alpha, r, np.clip(r, lo, hi)


def update_alpha_d(xi: np.ndarray, scene: Scene, sc: StackedConstraints, st: ProjectionState) -> ProjectionState:
    z = np.asarray(xi) @ sc.F.T
    blk = sc.split(z)
    No = sc.n_obs * sc.m
    out = st.copy()
    out.alpha_o, _, out.d_o = polar(blk["ox"] - sc.x_o, blk["oy"] - sc.y_o, sc.ell_a, sc.ell_b, 1.0, sc.d_max[:No])
    out.alpha_v, _, out.d_v = polar(blk["vx"], blk["vy"], 1.0, 1.0, scene.v_min, scene.v_max)
    out.alpha_a, _, out.d_a = polar(blk["ax"], blk["ay"], 1.0, 1.0, 0.0, scene.a_max)
    return out


def update_slack(xi: np.ndarray, sc: StackedConstraints, st: ProjectionState) -> ProjectionState:
    out = st.copy()
    out.s = np.maximum(0.0, sc.y_lane - np.asarray(xi) @ sc.G.T)
    return out


def update_lambda(xi: np.ndarray, sc: StackedConstraints, st: ProjectionState, params: ProjectionParams) -> ProjectionState:
    """Multiplier step driving the weighted residual ``F xi - e`` to zero."""
    out = st.copy()
    out.lam = st.lam - params.rho * (np.asarray(xi) @ sc.F.T - st.e) @ sc.FtW.T
    return out


def e_vector(sc: StackedConstraints, alpha_o, d_o, alpha_v, d_v, alpha_a, d_a, s) -> np.ndarray:
    return np.concatenate(
        [
            sc.x_o + sc.ell_a * d_o * np.cos(alpha_o),
            d_v * np.cos(alpha_v),
            d_a * np.cos(alpha_a),
            sc.y_o + sc.ell_b * d_o * np.sin(alpha_o),
            d_v * np.sin(alpha_v),
            d_a * np.sin(alpha_a),
            sc.y_lane - s,
        ],
        axis=-1,
    )


def assemble_e(st: ProjectionState, sc: StackedConstraints, scene: Scene = None) -> ProjectionState:
    out = st.copy()
    out.e = e_vector(sc, st.alpha_o, st.d_o, st.alpha_v, st.d_v, st.alpha_a, st.d_a, st.s)
    return out


def init_state(xi0: np.ndarray, scene: Scene, sc: StackedConstraints) -> ProjectionState:
    xi0 = np.asarray(xi0, dtype=float)
    lead = xi0.shape[:-1]
    No, m = sc.n_obs * sc.m, sc.m
    zeros = lambda k: np.zeros(lead + (k,))
    st = ProjectionState(
        alpha_o=zeros(No), d_o=zeros(No), alpha_v=zeros(m), d_v=zeros(m), alpha_a=zeros(m), d_a=zeros(m),
        lam=zeros(2 * sc.n), s=zeros(2 * m), e=zeros(sc.n_rows),
    )
    st = update_alpha_d(xi0, scene, sc, st)
    st = update_slack(xi0, sc, st)
    return assemble_e(st, sc, scene)


def qp_step(xi_target: np.ndarray, sc: StackedConstraints, st: ProjectionState, kkt: KktFactor, A, b) -> np.ndarray:
    """argmin 1/2|xi - xi_target|^2 + rho/2 |F xi - e|_W^2 - lam^T xi  s.t.  A xi = b."""
    xi_target = np.asarray(xi_target, dtype=float)
    top = xi_target + st.lam + kkt.rho * st.e @ sc.FtW.T
    b = np.broadcast_to(np.asarray(b, dtype=float), top.shape[:-1] + (A.shape[0],))
    sol, _ = kkt.solver.solve(np.atleast_2d(top).T, np.atleast_2d(b).T)
    return sol.T.reshape(top.shape)


def augmented_lagrangian(xi, xi_target, sc: StackedConstraints, st: ProjectionState, rho: float) -> np.ndarray:
    r = np.asarray(xi) @ sc.F.T - st.e
    return (
        0.5 * np.sum((xi - xi_target) ** 2, axis=-1)
        - np.sum(st.lam * xi, axis=-1)
        + 0.5 * rho * np.sum(sc.row_weight * r * r, axis=-1)
    )


def residual_norm(xi, sc: StackedConstraints, e) -> np.ndarray:
    return np.linalg.norm(np.asarray(xi) @ sc.F.T - e, axis=-1)


def constraint_violations(xi: np.ndarray, scene: Scene, basis: BasisSet) -> dict:
    """Per-family worst violation on the time grid (collision in normalised ellipse units)."""
    smp = eval_traj(basis, xi)
    out = {}
    if scene.n_obs:
        val = ((smp.x[..., None, :] - scene.obs_x) / scene.ell_a) ** 2 + (
            (smp.y[..., None, :] - scene.obs_y) / scene.ell_b
        ) ** 2
        out["collision"] = np.maximum(0.0, 1.0 - val).max(axis=(-2, -1))
    else:
        out["collision"] = np.zeros(smp.x.shape[:-1])
    out["speed"] = np.maximum(0.0, np.hypot(smp.xd, smp.yd) - scene.v_max).max(axis=-1)
    out["accel"] = np.maximum(0.0, np.hypot(smp.xdd, smp.ydd) - scene.a_max).max(axis=-1)
    out["lane"] = np.maximum(0.0, np.maximum(smp.y - scene.y_ub, scene.y_lb - smp.y)).max(axis=-1)
    return out


def default_equality(basis: BasisSet, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    from .setpoint_qp import BehavioralInput, equality_rows

    return equality_rows(basis, scene.ego0, BehavioralInput(0.0, 0.0))


def _run_batch(xis0, scene, basis, params, A, b, sc=None, kkt=None):
    xis0 = np.atleast_2d(np.asarray(xis0, dtype=float))
    B = xis0.shape[0]
    if sc is None:
        sc = stack_constraints(scene, basis, params.d_big)
    if kkt is None:
        kkt = KktFactor.build(sc, A, params.rho)
    b = np.broadcast_to(np.asarray(b, dtype=float), (B, A.shape[0]))

    st = init_state(xis0, scene, sc)
    res0 = residual_norm(xis0, sc, st.e)
    xi = xis0.copy()
    active = np.ones(B, dtype=bool)
    converged = np.zeros(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    final = res0.copy()
    history = [[] for _ in range(B)]
    omega = np.full(B, params.relax)
    best = np.full(B, np.inf)

    for _ in range(params.max_iters + 1):
        new = update_alpha_d(xi, scene, sc, st)
        new = update_slack(xi, sc, new)
        new = update_lambda(xi, sc, new, params)
        new = assemble_e(new, sc, scene)
        res = residual_norm(xi, sc, new.e)
        for j in np.flatnonzero(active):
            history[j].append(float(res[j]))
        final = np.where(active, res, final)
        omega, best = relax_schedule(res, best, omega, params)
        done = active & (res <= params.tol)
        converged |= done
        active &= ~done
        active &= iters < params.max_iters
        if not active.any():
            break
        xi_new = qp_step(xis0, sc, new, kkt, A, b)
        mask = active[:, None]
        xi = np.where(mask, xi + omega[:, None] * (xi_new - xi), xi)
        iters = iters + active
        for name in ("alpha_o", "d_o", "alpha_v", "d_v", "alpha_a", "d_a", "lam", "s", "e"):
            setattr(st, name, np.where(mask, getattr(new, name), getattr(st, name)))

    viol = constraint_violations(xi, scene, basis)
    return [
        ProjectionResult(
            xi_proj=xi[j].copy(),
            converged=bool(converged[j]),
            iters=int(iters[j]),
            final_residual=float(final[j]),
            max_violation={k: float(v[j]) for k, v in viol.items()},
            initial_residual=float(res0[j]),
            residual_history=history[j],
        )
        for j in range(B)
    ]


def project(
    xi0: np.ndarray,
    scene: Scene,
    basis: BasisSet,
    params: ProjectionParams = ProjectionParams(),
    A: Optional[np.ndarray] = None,
    b: Optional[np.ndarray] = None,
) -> ProjectionResult:
    """Project one trajectory; ``A, b`` default to the scene's initial conditions."""
    return project_batch([xi0], scene, basis, params, A, b)[0]


def project_batch(
    xis: Sequence[np.ndarray],
    scene: Scene,
    basis: BasisSet,
    params: ProjectionParams = ProjectionParams(),
    A: Optional[np.ndarray] = None,
    b: Optional[np.ndarray] = None,
) -> list[ProjectionResult]:
    """Project a batch sharing one scene; the KKT matrix is factored once.

    ``b`` may be a single right-hand side or one row per member.
    """
    scene = select_obstacles(scene, params.max_obstacles, params.obstacle_range)
    if A is None:
        A, b0 = default_equality(basis, scene)
        b = b0 if b is None else b
    return _run_batch(np.asarray(xis, dtype=float), scene, basis, params, A, b)
