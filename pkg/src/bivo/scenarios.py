"""Synthetic two-lane road scenes and the scene JSON format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .raster import EGO_GRID, hidden_agents, observe, snapshot
from .world import DT, Agent, Lane, LaneGraph, Scene, Trajectory, wrap_angles

TEMPLATES = ("straight_empty", "occluding_truck_crossing", "oncoming_behind_occluder",
             "parked_row_pedestrian", "random_traffic")
OCCLUSION_TEMPLATES = ("occluding_truck_crossing", "oncoming_behind_occluder", "parked_row_pedestrian")
SCENE_STEPS = 61  # 30 s at 0.5 s
LANE_WIDTH = 3.5
ROAD_X = (-100.0, 500.0)
SEGMENT = 50.0
ROAD_Y = (-LANE_WIDTH / 2 - 1.0, LANE_WIDTH * 1.5 + 1.0)


@dataclass(frozen=True)
class ScenarioTemplate:
    kind: str
    ego_speed: tuple = (8.0, 11.0)
    hidden_presence: float = 1.0  # probability the hidden agent exists at all
    conflict_prob: float = 0.85  # probability the hidden agent enters the ego corridor in time
    oncoming_prob: float = 0.5
    traffic_count: tuple = (1, 4)
    duration_steps: int = SCENE_STEPS
    max_tries: int = 200

    def __post_init__(self):
        if self.kind not in TEMPLATES:
            raise ValueError(f"unknown template {self.kind!r}")


# --- road ------------------------------------------------------------------------------------


def two_lane_road() -> tuple[LaneGraph, tuple[np.ndarray, ...]]:
    """Straight road along +x: ego lane at y = 0, opposing lane at y = 3.5 heading π."""
    n = int((ROAD_X[1] - ROAD_X[0]) // SEGMENT)
    lanes = []
    for i in range(n):
        x0 = ROAD_X[0] + i * SEGMENT
        xs = np.arange(x0, x0 + SEGMENT + 0.5, 1.0)
        lanes.append(Lane(f"E{i}", np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1),
                          (f"E{i + 1}",) if i + 1 < n else ()))
        xo = xs[::-1]
        lanes.append(Lane(f"O{i}", np.stack([xo, np.full_like(xo, LANE_WIDTH), np.full_like(xo, -math.pi)],
                                            axis=1), (f"O{i - 1}",) if i > 0 else ()))
    poly = np.array([[ROAD_X[0], ROAD_Y[0]], [ROAD_X[1], ROAD_Y[0]], [ROAD_X[1], ROAD_Y[1]],
                     [ROAD_X[0], ROAD_Y[1]]])
    return LaneGraph(lanes), (poly,)


_ROAD = None


def _road():
    global _ROAD
    if _ROAD is None:
        _ROAD = two_lane_road()
    return _ROAD


# --- trajectory helpers --------------------------------------------------------------------------


def states_from_path(xy: np.ndarray, heading0: float, dt: float = DT) -> np.ndarray:
    """(n, 5) states from sampled positions: forward-difference heading and speed."""
    xy = np.asarray(xy, float)
    d = np.diff(xy, axis=0)
    step = np.hypot(d[:, 0], d[:, 1])
    heading = np.empty(len(xy))
    prev = heading0
    for k in range(len(xy) - 1):
        if step[k] > 1e-6:
            prev = math.atan2(d[k, 1], d[k, 0])
        heading[k] = prev
    heading[-1] = prev
    speed = np.append(step / dt, step[-1] / dt if len(step) else 0.0)
    accel = np.append(np.diff(speed) / dt, 0.0)
    out = np.stack([xy[:, 0], xy[:, 1], wrap_angles(heading), speed, accel], axis=1)
    return out


def constant_velocity(x0: float, y0: float, heading: float, speed: float, n: int, dt: float = DT) -> np.ndarray:
    t = np.arange(n) * dt
    xy = np.stack([x0 + speed * t * math.cos(heading), y0 + speed * t * math.sin(heading)], axis=1)
    return states_from_path(xy, heading, dt)


def speed_profile_positions(v: np.ndarray, dt: float) -> np.ndarray:
    """Arc length at each sample for a per-sample speed profile (trapezoidal)."""
    return np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * dt)])


def wait_then_go(t_go: float, v_max: float, accel: float, n: int, dt: float = DT) -> np.ndarray:
    """Speed profile: stopped until t_go, then constant acceleration up to v_max."""
    t = np.arange(n) * dt
    return np.clip((t - t_go) * accel, 0.0, v_max)


def _agent(id_, kind, length, width, states) -> Agent:
    return Agent(id_, kind, length, width, Trajectory(id_, 0, DT, states))


# --- templates --------------------------------------------------------------------------------------


def _ego(rng, template: ScenarioTemplate) -> tuple[Agent, float]:
    v = float(rng.uniform(*template.ego_speed))
    return _agent("ego", "vehicle", 4.5, 1.9, constant_velocity(0.0, 0.0, 0.0, v, template.duration_steps)), v


def _crossing(x: float, y0: float, t_go: float, v_max: float, accel: float, n: int) -> np.ndarray:
    s = speed_profile_positions(wait_then_go(t_go, v_max, accel, n), DT)
    return states_from_path(np.stack([np.full(n, x), y0 + s], axis=1), math.pi / 2)


def _truck_crossing(rng, template, ego_v):
    n = template.duration_steps
    x_t = float(rng.uniform(30.0, 50.0))
    agents = [_agent("truck", "vehicle", 10.0, 2.5, constant_velocity(x_t, -3.0, 0.0, 0.0, n))]
    x_c = x_t + 7.0
    t_arrive = x_c / ego_v
    conflict = rng.random() < template.conflict_prob
    # about 1.3 s to reach the lane edge at 4 m/s with 3 m/s² launch
    t_go = t_arrive - 1.3 - float(rng.uniform(-0.5, 1.0)) if conflict else t_arrive + float(rng.uniform(2.0, 6.0))
    t_go = max(t_go, 0.5)
    if rng.random() < template.hidden_presence:
        agents.append(_agent("cyclist", "cyclist", 1.8, 0.7, _crossing(x_c, -5.0, t_go, 4.0, 3.0, n)))
    if rng.random() < template.oncoming_prob:
        # oncoming car waiting for the crossing, then driving on
        v = wait_then_go(t_go + 2.5, 10.0, 2.0, n)
        s = speed_profile_positions(v, DT)
        x0 = x_c + 8.0
        agents.append(_agent("oncoming", "vehicle", 4.5, 1.9,
                             states_from_path(np.stack([x0 - s, np.full(n, LANE_WIDTH)], axis=1), -math.pi)))
    return agents


def _oncoming_behind(rng, template, ego_v):
    n = template.duration_steps
    v_bus = float(rng.uniform(0.0, 2.0))
    x_b = float(rng.uniform(35.0, 48.0))
    agents = [_agent("bus", "vehicle", 12.0, 2.5, constant_velocity(x_b, LANE_WIDTH, -math.pi, v_bus, n))]
    conflict = rng.random() < template.conflict_prob
    # follower pulls out into the ego lane to pass the bus
    x_f0 = x_b + 10.0
    t = np.arange(n) * DT
    meet = (x_f0 - 10.0) / (ego_v + 6.0)
    t_out = max(meet - float(rng.uniform(1.5, 3.0)), 0.5) if conflict else meet + float(rng.uniform(3.0, 8.0))
    v = np.where(t < t_out, v_bus, np.minimum(v_bus + (t - t_out) * 2.0, 8.0))
    x = x_f0 - speed_profile_positions(v, DT)
    frac = np.clip((t - t_out) / 2.0, 0.0, 1.0)
    y = LANE_WIDTH * (1.0 - (1.0 - np.cos(math.pi * frac)) / 2.0)
    if rng.random() < template.hidden_presence:
        agents.append(_agent("follower", "vehicle", 4.5, 1.9, states_from_path(np.stack([x, y], axis=1), -math.pi)))
    return agents


def _parked_row(rng, template, ego_v):
    n = template.duration_steps
    k = int(rng.integers(4, 7))
    x0 = float(rng.uniform(15.0, 25.0))
    agents = [_agent(f"parked{i}", "vehicle", 4.5, 1.9, constant_velocity(x0 + 6.0 * i, -2.7, 0.0, 0.0, n))
              for i in range(k)]
    x_p = x0 + 6.0 * (k - 1) + 4.0
    conflict = rng.random() < template.conflict_prob
    t_arrive = x_p / ego_v
    t_go = t_arrive - 2.2 - float(rng.uniform(0.0, 1.5)) if conflict else t_arrive + float(rng.uniform(2.0, 6.0))
    t_go = max(t_go, 0.5)
    if rng.random() < template.hidden_presence:
        agents.append(_agent("pedestrian", "pedestrian", 0.6, 0.6, _crossing(x_p, -4.6, t_go, 1.4, 2.0, n)))
    return agents


def _random_traffic(rng, template, ego_v):
    n = template.duration_steps
    agents = []
    count = int(rng.integers(template.traffic_count[0], template.traffic_count[1] + 1))
    for i in range(count):
        kind = rng.choice(["lead", "oncoming", "oncoming", "walker"])
        if kind == "lead":
            agents.append(_agent(f"car{i}", "vehicle", 4.5, 1.9,
                                 constant_velocity(float(rng.uniform(20.0, 45.0)), 0.0, 0.0, ego_v, n)))
        elif kind == "oncoming":
            agents.append(_agent(f"car{i}", "vehicle", 4.5, 1.9,
                                 constant_velocity(float(rng.uniform(40.0, 250.0)), LANE_WIDTH, -math.pi,
                                                   float(rng.uniform(6.0, 13.0)), n)))
        else:
            agents.append(_agent(f"walker{i}", "pedestrian", 0.6, 0.6,
                                 constant_velocity(float(rng.uniform(-10.0, 80.0)), float(rng.uniform(-7.0, -4.0)),
                                                   0.0, float(rng.uniform(0.8, 1.6)), n)))
    return agents


_BUILDERS = {
    "straight_empty": lambda rng, t, v: [],
    "occluding_truck_crossing": _truck_crossing,
    "oncoming_behind_occluder": _oncoming_behind,
    "parked_row_pedestrian": _parked_row,
    "random_traffic": _random_traffic,
}


def any_hidden(scene: Scene, steps: Sequence[int], grid: int = EGO_GRID[0]) -> bool:
    ego = scene.ego
    for t in steps:
        fps = snapshot(scene, t)
        s = ego.trajectory.data[t]
        view = observe(fps, ego.id, (s[0], s[1], s[2]), grid, grid)
        if hidden_agents(view, fps, ego.id):
            return True
    return False


def generate_scene(template: ScenarioTemplate | str, rng: np.random.Generator, scene_id: Optional[str] = None,
                   check_steps: int = 31) -> Scene:
    """One scene from a template. random_traffic is resampled until nothing is ever hidden."""
    if isinstance(template, str):
        template = ScenarioTemplate(template)
    lane_graph, polys = _road()
    sid = scene_id or template.kind
    for _ in range(template.max_tries):
        ego, v = _ego(rng, template)
        agents = _BUILDERS[template.kind](rng, template, v)
        scene = Scene(sid, lane_graph, polys, tuple(agents), ego, template.duration_steps)
        if template.kind != "random_traffic" or not any_hidden(scene, range(min(check_steps,
                                                                                template.duration_steps))):
            return scene
    raise RuntimeError("could not sample a random_traffic scene without hidden agents")


def template_mix(n: int, rng: np.random.Generator, occluded_fraction: float = 0.1) -> list[str]:
    """Exactly round(fraction·n) occlusion templates, the rest split between empty and traffic."""
    n_occ = int(round(occluded_fraction * n))
    kinds = [OCCLUSION_TEMPLATES[i % len(OCCLUSION_TEMPLATES)] for i in range(n_occ)]
    kinds += ["straight_empty" if i % 2 == 0 else "random_traffic" for i in range(n - n_occ)]
    return [kinds[i] for i in rng.permutation(n)]


def generate_batch(n: int, seed: int, occluded_fraction: float = 0.1,
                   kinds: Optional[Sequence[str]] = None, **template_kw) -> list[Scene]:
    rng = np.random.default_rng(seed)
    kinds = list(kinds) if kinds is not None else template_mix(n, rng, occluded_fraction)
    scenes = []
    for i, kind in enumerate(kinds):
        sub = np.random.default_rng([seed, i])
        scenes.append(generate_scene(ScenarioTemplate(kind, **template_kw), sub, f"{kind}_{seed}_{i:05d}"))
    return scenes


# --- JSON ------------------------------------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    def agent(a: Agent):
        tr = a.trajectory
        return {"id": a.id, "class": a.kind, "length": a.length, "width": a.width, "dt": tr.dt,
                "start_step": tr.start_step, "states": tr.data.tolist()}
    return {
        "id": scene.id,
        "lanes": [{"id": l.id, "centerline": l.centerline.tolist(), "successors": list(l.successors)}
                  for l in scene.lane_graph.lanes],
        "drivable_polygons": [np.asarray(p).tolist() for p in scene.drivable_polygons],
        "agents": [agent(a) for a in (scene.ego, *scene.agents)],
        "ego_id": scene.ego.id,
        "duration_steps": scene.duration_steps,
        "dt": scene.dt,
    }


def scene_from_dict(d: dict) -> Scene:
    try:
        lanes = LaneGraph([Lane(l["id"], np.array(l["centerline"], float), tuple(l["successors"]))
                           for l in d["lanes"]])
        agents = [Agent(a["id"], a["class"], float(a["length"]), float(a["width"]),
                        Trajectory(a["id"], int(a["start_step"]), float(a["dt"]), np.array(a["states"], float)))
                  for a in d["agents"]]
        ego = [a for a in agents if a.id == d["ego_id"]]
        if len(ego) != 1:
            raise ValueError("ego_id must match exactly one agent")
        return Scene(d["id"], lanes, tuple(np.array(p, float) for p in d["drivable_polygons"]),
                     tuple(a for a in agents if a.id != d["ego_id"]), ego[0], int(d["duration_steps"]),
                     float(d.get("dt", DT)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scene: {exc}") from exc


def dumps_scene(scene: Scene) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def save_scene(path, scene: Scene) -> Path:
    path = Path(path)
    path.write_text(dumps_scene(scene))
    return path


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
