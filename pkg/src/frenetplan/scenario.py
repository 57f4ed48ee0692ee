"""Scenario and configuration files: schema, validation and conversion to a Frenet scene."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Optional

import jsonschema
import numpy as np

from .behavior import BehaviorDistribution, RefinementConfig
from .frenet import CenterLine, build_centerline, pose_to_frenet, to_frenet, velocity_to_frenet
from .projection import ProjectionParams, Scene
from .setpoint_qp import EgoBoundary, SetpointWeights
from .sim import PlannerConfig, SimConfig

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


CONFIG_SCHEMA = _obj(
    {
        "projection": _obj(
            {
                "rho": _pos,
                "tol": _pos,
                "max_iters": {"type": "integer", "minimum": 1},
                "relax": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 2},
                "d_big": _pos,
            }
        ),
        "weights": _obj(
            {k: {"type": "number", "minimum": 0} for k in ("w_s", "w_l", "w_v", "w_jerk")}
            | {"kappa_p": _pos, "kappa_v": _pos}
        ),
        "behavior": _obj(
            {
                "v_mean": _num,
                "v_std": {"type": "number", "minimum": 0},
                "y_mean": _num,
                "y_std": {"type": "number", "minimum": 0},
                "num_samples": {"type": "integer", "minimum": 1},
            }
        ),
        "refine": _obj(
            {
                "steps": {"type": "integer", "minimum": 0},
                "lr": _pos,
                "unroll_iters": {"type": "integer", "minimum": 1},
                "loss_weights": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2},
            }
        ),
        "basis": _obj(
            {"degree": {"type": "integer", "minimum": 3}, "horizon": _pos, "m": {"type": "integer", "minimum": 4}}
        ),
        "sim": _obj({"replan_dt": _pos, "sim_dt": _pos, "max_time": _pos, "success_radius": _pos}),
    }
)

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Planning scenario (global frame, meters / seconds / radians)",
    "type": "object",
    "properties": {
        "centerline": {
            "type": "array",
            "minItems": 2,
            "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
        },
        "ego": _obj({"x": _num, "y": _num, "heading": _num, "speed": {"type": "number", "minimum": 0}}, ("x", "y", "heading", "speed")),
        "obstacles": {"type": "array", "items": _obj({"x": _num, "y": _num, "vx": _num, "vy": _num}, ("x", "y", "vx", "vy"))},
        "lane": _obj({"y_lb": _num, "y_ub": _num}, ("y_lb", "y_ub")),
        "limits": _obj({"v_max": _pos, "v_min": {"type": "number", "minimum": 0}, "a_max": _pos, "ell_a": _pos, "ell_b": _pos}),
        "goal": _obj({"x": _num, "y": _num}, ("x", "y")),
        "planner": CONFIG_SCHEMA,
    },
    "required": ["centerline", "ego", "obstacles", "lane", "goal"],
    "additionalProperties": False,
}


class ScenarioError(ValueError):
    """Invalid scenario or configuration file; the message names the location."""


@dataclass(frozen=True)
class RunConfig:
    params: ProjectionParams = ProjectionParams()
    weights: SetpointWeights = SetpointWeights()
    dist: BehaviorDistribution = BehaviorDistribution()
    refine: RefinementConfig = RefinementConfig()
    basis: dict = field(default_factory=lambda: {"degree": 10, "horizon": 6.0, "m": 30})
    sim: SimConfig = SimConfig()
    planner: PlannerConfig = PlannerConfig()
    # Which sections the user overrode (closed-loop keeps its lighter defaults otherwise).
    overridden: frozenset = frozenset()

    def closed_loop_planner(self) -> PlannerConfig:
        pc = replace(self.planner, weights=self.weights, params=self.params, **self.basis)
        if "behavior" in self.overridden:
            pc = replace(pc, dist=self.dist)
        if "refine" in self.overridden:
            pc = replace(pc, refine=self.refine)
        return pc


def _path(err: jsonschema.ValidationError) -> str:
    loc = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
    return "$" + loc


def _validate(doc: Any, schema: dict, what: str) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ScenarioError(f"{what}: field {_path(e)}: {e.message}")


def _read_json(path) -> Any:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def apply_overrides(cfg: RunConfig, doc: dict) -> RunConfig:
    _validate(doc, CONFIG_SCHEMA, "config")
    out = cfg
    if "projection" in doc:
        out = replace(out, params=replace(out.params, **doc["projection"]))
    if "weights" in doc:
        out = replace(out, weights=replace(out.weights, **doc["weights"]))
    if "behavior" in doc:
        out = replace(out, dist=replace(out.dist, **doc["behavior"]))
    if "refine" in doc:
        r = dict(doc["refine"])
        if "loss_weights" in r:
            r["loss_weights"] = tuple(r["loss_weights"])
        out = replace(out, refine=replace(out.refine, **r))
    if "basis" in doc:
        out = replace(out, basis={**out.basis, **doc["basis"]})
    if "sim" in doc:
        out = replace(out, sim=replace(out.sim, **doc["sim"]))
    return replace(out, overridden=out.overridden | frozenset(doc))


def load_config(path: Optional[str], base: RunConfig = RunConfig()) -> RunConfig:
    if path is None:
        return base
    try:
        return apply_overrides(base, _read_json(path))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"config: {exc}") from exc


@dataclass(frozen=True)
class LoadedScenario:
    centerline: CenterLine
    scene: Scene
    goal: np.ndarray  # Frenet (s, d)
    config: RunConfig
    raw: dict


def scenario_from_dict(doc: dict, t_grid: Optional[np.ndarray] = None, config: RunConfig = RunConfig()) -> LoadedScenario:
    _validate(doc, SCENARIO_SCHEMA, "scenario")
    if "planner" in doc:
        config = apply_overrides(config, doc["planner"])
    try:
        cl = build_centerline(doc["centerline"])
        ego = doc["ego"]
        pose = pose_to_frenet(cl, (ego["x"], ego["y"]), ego["heading"], ego["speed"])
        b0 = EgoBoundary(
            x=pose.s,
            xd=pose.speed * math.cos(pose.heading_rel),
            y=pose.d,
            yd=pose.speed * math.sin(pose.heading_rel),
        )
        states = []
        for i, o in enumerate(doc["obstacles"]):
            s, d = to_frenet(cl, (o["x"], o["y"]))
            v = velocity_to_frenet(cl, s, (o["vx"], o["vy"]))
            states.append([s, d, v[0], v[1]])
        gs, gd = to_frenet(cl, (doc["goal"]["x"], doc["goal"]["y"]))
        limits = doc.get("limits", {})
        if t_grid is None:
            b = config.basis
            t_grid = np.linspace(0.0, b["horizon"], b["m"])
        scene = Scene.from_obstacle_states(
            b0, np.array(states, dtype=float).reshape(-1, 4), t_grid, y_lb=doc["lane"]["y_lb"], y_ub=doc["lane"]["y_ub"], **limits
        )
    except ValueError as exc:
        raise ScenarioError(f"scenario: {exc}") from exc
    return LoadedScenario(cl, scene, np.array([gs, gd]), config, doc)


def load_scenario(path, config: RunConfig = RunConfig()) -> LoadedScenario:
    return scenario_from_dict(_read_json(path), config=config)


def scene_to_dict(scene: Scene, goal) -> dict:
    """Scenario document for a straight center-line along +x (Frenet == global)."""
    x_end = max(float(goal[0]), float(scene.obs_state[:, 0].max()) if scene.n_obs else 0.0) + 200.0
    e = scene.ego0
    return {
        "centerline": [[-50.0, 0.0], [x_end, 0.0]],
        "ego": {"x": e.x, "y": e.y, "heading": math.atan2(e.yd, e.xd) if (e.xd or e.yd) else 0.0, "speed": math.hypot(e.xd, e.yd)},
        "obstacles": [
            {"x": float(o[0]), "y": float(o[1]), "vx": float(o[2]), "vy": float(o[3])}
            for o in (scene.obs_state if scene.obs_state is not None else [])
        ],
        "lane": {"y_lb": scene.y_lb, "y_ub": scene.y_ub},
        "limits": {f.name: getattr(scene, f.name) for f in fields(scene) if f.name in ("v_max", "v_min", "a_max", "ell_a", "ell_b")},
        "goal": {"x": float(goal[0]), "y": float(goal[1])},
    }
