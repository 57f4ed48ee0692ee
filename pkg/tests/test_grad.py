import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frenetplan.basis import eval_traj, linear_coeffs, make_basis
from frenetplan.errors import KinkWarning
from frenetplan.grad import (
    finite_difference_jacobian,
    goal_loss,
    goal_loss_grad,
    gradcheck,
    loss_gradients,
    pipeline_jacobian,
    planner_loss,
    planner_loss_grad,
    relative_error,
    unrolled_output,
)
from frenetplan.projection import ProjectionParams, Scene
from frenetplan.setpoint_qp import BehavioralInput, EgoBoundary, PartialSolution, SetpointWeights
from scenegen import feasible_projection_scene

W0 = SetpointWeights()


def scene_with(basis, obstacles=(), ego=EgoBoundary(xd=5.0), **kw):
    return Scene.from_obstacle_states(ego, np.array(obstacles, dtype=float).reshape(-1, 4), basis.t, **kw)


def dense_planner_loss(xi, scene, basis):
    """Sample-by-sample hinge evaluation written with plain loops."""
    s = eval_traj(basis, xi)
    terms = []
    for i in range(scene.n_obs):
        for k in range(basis.m):
            g = 1 - ((s.x[k] - scene.obs_x[i, k]) / scene.ell_a) ** 2 - ((s.y[k] - scene.obs_y[i, k]) / scene.ell_b) ** 2
            terms.append(max(0.0, g))
    for k in range(basis.m):
        terms.append(max(0.0, np.hypot(s.xd[k], s.yd[k]) - scene.v_max))
        terms.append(max(0.0, np.hypot(s.xdd[k], s.ydd[k]) - scene.a_max))
        terms.append(max(0.0, s.y[k] - scene.y_ub))
        terms.append(max(0.0, scene.y_lb - s.y[k]))
    return float(np.sqrt(np.sum(np.square(terms))))


# ---------------------------------------------------------------- losses


def test_goal_loss_examples(basis):
    xi = np.concatenate([linear_coeffs(basis, 0.0, 10.0 / 6.0), np.zeros(11)])
    assert goal_loss(xi, basis, (10.0, 0.0)) == pytest.approx(0.0, abs=1e-20)
    assert goal_loss(xi, basis, (13.0, 4.0)) == pytest.approx(25.0)


def test_goal_loss_gradient_fd(basis, rng):
    for _ in range(5):
        xi, goal = rng.normal(0, 5, 22), rng.normal(0, 10, 2)
        g = goal_loss_grad(xi, basis, goal)
        fd = np.array([(goal_loss(xi + h, basis, goal) - goal_loss(xi - h, basis, goal)) / 2e-6 for h in 1e-6 * np.eye(22)])
        assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_planner_loss_feasible_is_zero(basis):
    xi = np.concatenate([linear_coeffs(basis, 0.0, 5.0), np.full(11, 0.3)])
    assert planner_loss(xi, scene_with(basis, [[80, 0, 5, 0]]), basis) == 0.0


def test_planner_loss_single_speed_violation(basis):
    # x = 5 t + 3 tau^10: speed 10 only at the last sample, 8.65 before it.
    xi = np.concatenate([linear_coeffs(basis, 0.0, 5.0), np.zeros(11)])
    xi[10] += 3.0
    s = eval_traj(basis, xi)
    delta = 0.05
    scene = scene_with(basis, v_max=s.xd[-1] - delta, a_max=20.0)
    assert s.xd[-2] < scene.v_max
    assert planner_loss(xi, scene, basis) == pytest.approx(delta, abs=1e-12)


def test_planner_loss_dual_implementation(basis, rng):
    scene = scene_with(basis, [[20, 0.5, 3, 0], [35, -1, 0, 0.2]])
    for _ in range(20):
        xi = np.concatenate([linear_coeffs(basis, 0, rng.uniform(2, 12)), rng.normal(0, 1.5, 11)]) + rng.normal(0, 2, 22)
        assert abs(planner_loss(xi, scene, basis) - dense_planner_loss(xi, scene, basis)) <= 1e-10


def test_planner_loss_gradient_fd(basis, rng):
    scene = scene_with(basis, [[20, 0.5, 3, 0]])
    xi = np.concatenate([linear_coeffs(basis, 0, 8.0), rng.normal(0, 1.5, 11)]) + rng.normal(0, 1, 22)
    assert planner_loss(xi, scene, basis) > 0
    g = planner_loss_grad(xi, scene, basis)
    fd = np.array([(planner_loss(xi + h, scene, basis) - planner_loss(xi - h, scene, basis)) / 2e-6 for h in 1e-6 * np.eye(22)])
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_losses_nonnegative(seed):
    basis = make_basis()
    rng = np.random.default_rng(seed)
    xi = rng.normal(0, 10, 22)
    scene = scene_with(basis, [[rng.uniform(0, 40), rng.uniform(-2, 2), 0, 0]])
    assert goal_loss(xi, basis, rng.normal(0, 10, 2)) >= 0
    assert planner_loss(xi, scene, basis) >= 0


def test_hinge_subgradient_zero_on_boundary(basis):
    xi = np.concatenate([linear_coeffs(basis, 0.0, 5.0), np.zeros(11)])
    s = eval_traj(basis, xi)
    scene = scene_with(basis, v_max=float(np.hypot(s.xd, s.yd).max()))  # samples touch the bound
    assert planner_loss(xi, scene, basis) == 0.0
    np.testing.assert_array_equal(planner_loss_grad(xi, scene, basis), 0.0)


# ------------------------------------------------------------ jacobian


def smooth_instances(basis, n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        _, scene, _ = feasible_projection_scene(rng, basis)
        p = BehavioralInput(rng.uniform(2, 9), rng.uniform(-1.2, 1.2))
        with warnings.catch_warnings():
            warnings.simplefilter("error", KinkWarning)
            try:
                pipeline_jacobian(p, scene, basis)
            except KinkWarning:
                continue
        out.append((p, scene))
    return out


def test_zero_perturbation(basis):
    scene = scene_with(basis, [[25, 0.5, 2, 0]])
    p = BehavioralInput(6, 0.2)
    J = pipeline_jacobian(p, scene, basis)
    np.testing.assert_array_equal(J.full @ np.zeros(2), 0.0)
    np.testing.assert_array_equal(unrolled_output(p, scene, basis), unrolled_output(p.with_p(p.p + 0.0), scene, basis))
    assert J.d_xi_d_p.shape == (22, 2) and J.d_xi_d_term is None and J.unroll_iters == 50


def test_obstacle_free_signs(basis):
    scene = scene_with(basis)
    p = BehavioralInput(6, 0.5)
    J = pipeline_jacobian(p, scene, basis).d_xi_d_p
    w_end, wd_end = basis.W[-1], basis.Wd[-1]
    assert w_end @ J[11:, 1] > 0  # endpoint y vs y_d
    assert wd_end @ J[:11, 0] > 0  # endpoint speed vs v_d
    fd = finite_difference_jacobian(p, scene, basis)
    assert w_end @ fd[11:, 1] > 0 and wd_end @ fd[:11, 0] > 0


def test_fd_agreement_on_smooth_instances(basis):
    for p, scene in smooth_instances(basis, 10):
        errs, smooth = gradcheck(p, scene, basis)
        assert smooth and max(errs.values()) <= 1e-4


def test_terminal_and_partial_blocks(basis):
    scene = scene_with(basis, [[30, 1.0, 1, 0]])
    p = BehavioralInput(6, 0.0, p_term=np.array([36.0, 6.0, 0.2, 0.0]), partial=PartialSolution([5, 16], [15.0, 0.1]))
    errs, smooth = gradcheck(p, scene, basis)
    assert smooth
    assert set(errs) == {"p", "p_term", "partial"}
    assert max(errs.values()) <= 1e-4


def test_directional_derivative(basis, rng):
    (p, scene), = smooth_instances(basis, 1, seed=3)
    J = pipeline_jacobian(p, scene, basis).d_xi_d_p
    for _ in range(5):
        v = rng.normal(size=2)
        v /= np.linalg.norm(v)
        h = 1e-6
        lhs = (unrolled_output(p.with_p(p.p + h * v), scene, basis) - unrolled_output(p.with_p(p.p - h * v), scene, basis)) / (2 * h)
        assert np.linalg.norm(lhs - J @ v) <= 1e-6 * max(1.0, np.linalg.norm(J @ v))


def test_kink_warning_at_speed_bound(basis):
    scene = scene_with(basis, ego=EgoBoundary(xd=10.0))  # first sample sits on v_max
    with pytest.warns(KinkWarning):
        J = pipeline_jacobian(BehavioralInput(9.0, 0.0), scene, basis)
    assert not J.smooth
    assert np.all(np.isfinite(J.full))


def test_relative_error_columnwise():
    R = np.array([[1.0, 100.0], [0.0, 0.0]])
    assert relative_error(R + np.array([[1e-3, 1e-3], [0, 0]]), R) == pytest.approx(1e-3)


# ---------------------------------------------------------------- losses


def test_gradient_vanishes_at_own_endpoint(basis):
    scene = scene_with(basis, [[70, 1.0, 6, 0]])
    p = BehavioralInput(6, 0.3)
    xi = unrolled_output(p, scene, basis)
    s = eval_traj(basis, xi)
    rep = loss_gradients(p, scene, basis, (s.x[-1], s.y[-1]))
    assert rep.planner_loss == 0.0
    assert np.linalg.norm(rep.grad_p) <= 1e-3


def test_descent_toward_lateral_goal(basis):
    scene = scene_with(basis, y_lb=-3.5, y_ub=3.5)
    p = BehavioralInput(5.0, 0.0)
    goal = (30.0, 3.0)
    losses = []
    for _ in range(21):
        rep = loss_gradients(p, scene, basis, goal)
        losses.append(rep.goal_loss)
        p = p.with_p(p.p - 0.1 * rep.grad_p)
    assert np.all(np.diff(losses) < 0)


def test_combined_gradient_fd(basis):
    for p, scene in smooth_instances(basis, 4, seed=11):
        goal = (35.0, 1.0)
        rep = loss_gradients(p, scene, basis, goal, unroll_iters=5)
        if not rep.smooth:
            continue

        def total(q):
            xi = unrolled_output(p.with_p(q), scene, basis, unroll_iters=5)
            return goal_loss(xi, basis, goal) + planner_loss(xi, scene, basis)

        fd = np.array([(total(p.p + h) - total(p.p - h)) / 2e-5 for h in 1e-5 * np.eye(2)])
        assert np.linalg.norm(rep.grad_p - fd) <= 1e-4 * np.linalg.norm(fd)
