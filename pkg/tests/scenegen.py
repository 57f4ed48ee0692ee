"""Scene generators shared by the test modules."""

from __future__ import annotations

import numpy as np

from frenetplan.basis import BasisSet, eval_traj
from frenetplan.projection import Scene, constraint_violations
from frenetplan.setpoint_qp import BehavioralInput, EgoBoundary, SetpointWeights, solve_setpoint


def _min_normalized(s, xo, yo, a, b):
    return float(np.sqrt(((s.x - xo) / a) ** 2 + ((s.y - yo) / b) ** 2).min())


def feasible_projection_scene(rng, basis: BasisSet, weights=SetpointWeights(), clearance=1.1):
    """A scene that is feasible by construction plus a nominal plan to project.

    A certificate plan satisfying every kinematic and lane limit is drawn
    first. Obstacles (0-3, constant velocity) are placed on the path of a
    perturbed nominal plan while keeping ``clearance`` normalised ellipse
    units from the certificate. Returns ``(xi_nominal, scene, xi_certificate)``.
    """
    free = lambda ego: Scene.from_obstacle_states(ego, np.zeros((0, 4)), basis.t)
    while True:
        ego = EgoBoundary(xd=rng.uniform(3.0, 9.0), y=rng.uniform(-1.0, 1.0))
        cert_p = BehavioralInput(rng.uniform(2.0, 9.5), rng.uniform(-1.2, 1.2))
        cert = solve_setpoint(basis, weights, cert_p, ego)
        if max(constraint_violations(cert, free(ego), basis).values()) > 0:
            continue
        nom_p = BehavioralInput(
            max(0.5, cert_p.v_d + rng.uniform(-2.0, 2.0)),
            float(np.clip(cert_p.y_d + rng.uniform(-1.0, 1.0), -2.5, 2.5)),
        )
        nominal = solve_setpoint(basis, weights, nom_p, ego)
        s_nom, s_cert = eval_traj(basis, nominal), eval_traj(basis, cert)
        want = int(rng.integers(0, 4))
        obs = []
        for _ in range(50):
            if len(obs) >= want:
                break
            k = int(rng.integers(8, basis.m))
            vo = rng.uniform(0.0, 9.0)
            yo = s_nom.y[k] + rng.uniform(-0.5, 0.5)
            x0 = s_nom.x[k] - vo * basis.t[k] + rng.uniform(-2.0, 2.0)
            if abs(yo) > 1.75:
                continue
            if _min_normalized(s_cert, x0 + vo * basis.t, yo, 5.0, 2.5) >= clearance:
                obs.append([x0, yo, vo, 0.0])
        if len(obs) < want:
            continue
        scene = Scene.from_obstacle_states(ego, np.array(obs).reshape(-1, 4), basis.t)
        return nominal, scene, cert


def feasible_projection_scenes(n: int, seed: int, basis: BasisSet):
    rng = np.random.default_rng(seed)
    return [feasible_projection_scene(rng, basis) for _ in range(n)]
