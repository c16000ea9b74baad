"""Sampling-based planner with an occlusion-aware collision cost.

Candidates are cubic Hermite splines from the ego state to terminals placed
along the lane graph. Each candidate is scored by heading deviation, lateral
deviation, effort, collision and goal terms; the cheapest one is chosen.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from .driver_sensor import DriverSensorModel, fused_ego_grid
from .generator import OcclusionGenModel, sample_trajectory_arrays
from .raster import EGO_GRID, OCCLUDED, OccupancyGrid, View, cell_centers, hidden_agents, observe, \
    rasterize_road, snapshot
from .world import (ACCEL, DT, HEADING, HORIZON_STEPS, SPEED, X, Y, ControlLimits, LaneGraph, Scene,
                    Trajectory, feasibility_mask, frame_to_world, wrap_angles)

LANE_SEARCH_RADIUS = 10.0


class PlannerMode(str, enum.Enum):
    BIVO = "BiVO"
    NO_REASONING = "NoReasoning"
    CVAE_ONLY = "CvaeOnly"
    DRIVER_SENSOR_HEURISTIC = "DriverSensorHeuristic"
    ORACLE = "Oracle"

    def __str__(self) -> str:
        return self.value


ALL_MODES = tuple(PlannerMode)


@dataclass(frozen=True)
class CostWeights:
    w_hd: float = 1.0
    w_vd: float = 1.0
    w_ef: float = 0.1
    w_col: float = 10.0
    w_goal: float = 1.0
    rbf_sigma: float = 2.0

    def __post_init__(self):
        if min(self.w_hd, self.w_vd, self.w_ef, self.w_col, self.w_goal) < 0:
            raise ValueError("cost weights must be nonnegative")
        if not self.rbf_sigma > 0:
            raise ValueError("rbf_sigma must be positive")


COST_TERMS = ("heading", "lane_dev", "effort", "collision", "goal")


@dataclass(frozen=True)
class CostBreakdown:
    heading: float
    lane_dev: float
    effort: float
    collision: float
    goal: float

    @property
    def total(self) -> float:
        return total_of(self.heading, self.lane_dev, self.effort, self.collision, self.goal)

    def as_dict(self) -> dict:
        return {**{k: getattr(self, k) for k in COST_TERMS}, "total": self.total}

    @classmethod
    def from_row(cls, row) -> "CostBreakdown":
        return cls(*(float(v) for v in row))


def total_of(heading, lane_dev, effort, collision, goal):
    """Fixed summation order so scalar and batched totals agree bit for bit."""
    return (((heading + lane_dev) + effort) + collision) + goal


@dataclass(frozen=True)
class PlannerConfig:
    n_candidates: int = 64
    n_samples: int = 1000
    pi_e: float = 0.1
    weights: CostWeights = CostWeights()
    limits: ControlLimits = ControlLimits()
    horizon_steps: int = HORIZON_STEPS
    dt: float = DT
    lateral_offsets: tuple = tuple(np.round(np.arange(-3.5, 3.51, 0.5), 2))
    speed_fractions: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    dsh_top: int = 3
    dsh_threshold: float = 0.6
    dsh_speed: float = 5.0
    grid: int = EGO_GRID[0]
    standard_normal: bool = False

    def __post_init__(self):
        if self.n_candidates < 1 or self.n_samples < 1:
            raise ValueError("n_candidates and n_samples must be >= 1")
        if not 0.0 <= self.pi_e <= 1.0:
            raise ValueError("pi_e must lie in [0, 1]")
        if self.horizon_steps < 2:
            raise ValueError("horizon needs at least two steps")

    @property
    def horizon_s(self) -> float:
        return self.horizon_steps * self.dt


@dataclass
class PlannerModels:
    driver_sensor: Optional[DriverSensorModel] = None
    generator: Optional[OcclusionGenModel] = None  # conditioned on the fused grid
    generator_observed: Optional[OcclusionGenModel] = None  # conditioned on the raw observation


# --- terminals and splines ------------------------------------------------------------


def _branches(lane_graph: LaneGraph, lane_idx: int, point_idx: int, max_arc: float) -> list[np.ndarray]:
    """Centerline polylines from the nearest point onwards, one per successor path."""
    out = []

    def walk(pts: np.ndarray, lane_id: str, visited: tuple):
        arc = float(np.sum(np.hypot(*np.diff(pts[:, :2], axis=0).T))) if len(pts) > 1 else 0.0
        lane = lane_graph.by_id[lane_id]
        nxt = [s for s in lane.successors if s not in visited]
        if arc >= max_arc or not nxt:
            out.append(pts)
            return
        for s in nxt:
            cl = lane_graph.by_id[s].centerline
            if np.hypot(*(cl[0, :2] - pts[-1, :2])) < 1e-9:
                cl = cl[1:]
            walk(np.concatenate([pts, cl]), s, visited + (s,))

    lane = lane_graph.lanes[lane_idx]
    walk(lane.centerline[point_idx:], lane.id, (lane.id,))
    return out


def _point_at(branch: np.ndarray, s: float) -> np.ndarray:
    """(x, y, heading) at arc length ``s`` along a polyline, clamped to its ends."""
    if len(branch) == 1:
        return branch[0].copy()
    arc = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(branch[:, :2], axis=0).T))])
    s = min(max(s, 0.0), arc[-1])
    i = int(np.clip(np.searchsorted(arc, s, side="right") - 1, 0, len(branch) - 2))
    seg = arc[i + 1] - arc[i]
    f = 0.0 if seg <= 0 else (s - arc[i]) / seg
    xy = branch[i, :2] + f * (branch[i + 1, :2] - branch[i, :2])
    d = branch[i + 1, :2] - branch[i, :2]
    heading = math.atan2(d[1], d[0]) if seg > 0 else branch[i, 2]
    return np.array([xy[0], xy[1], heading])


def sample_terminals(lane_graph: LaneGraph, ego_state: np.ndarray, J: int, horizon_s: float,
                     limits: ControlLimits = ControlLimits(),
                     lateral_offsets: Sequence[float] = (0.0,),
                     speed_fractions: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0)) -> np.ndarray:
    """Up to J terminal states (x, y, heading, speed, 0) along reachable lanes.

    Terminals are ordered offset ring by offset ring (centreline first), and
    within a ring by speed, then branch, so truncating at J keeps every branch
    and every speed represented before wider lateral offsets.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    ego_state = np.asarray(ego_state, float)
    v0 = float(ego_state[SPEED])
    v_top = min(max(1.5 * v0, 5.0), limits.max_speed)
    speeds = [f * v_top for f in speed_fractions]
    max_arc = horizon_s * limits.max_speed
    offsets = sorted(lateral_offsets, key=lambda o: (abs(o), o))
    dist, li, pi, _, _ = lane_graph.nearest(ego_state[None, :2]) if lane_graph.lanes else (None,) * 5
    out = []
    if dist is None or dist[0] > LANE_SEARCH_RADIUS:
        h = ego_state[HEADING]
        ahead = np.array([ego_state[X], ego_state[Y], h])
        for off in offsets:
            for vT in speeds:
                s = min(0.5 * (v0 + vT) * horizon_s, max_arc)
                out.append([ahead[0] + s * math.cos(h) - off * math.sin(h),
                            ahead[1] + s * math.sin(h) + off * math.cos(h), h, vT, 0.0])
                if len(out) == J:
                    return np.array(out)
        return np.array(out)
    branches = _branches(lane_graph, int(li[0]), int(pi[0]), max_arc)
    for off in offsets:
        for vT in speeds:
            s = min(0.5 * (v0 + vT) * horizon_s, max_arc)
            for br in branches:
                p = _point_at(br, s)
                out.append([p[0] - off * math.sin(p[2]), p[1] + off * math.cos(p[2]), p[2], vT, 0.0])
                if len(out) == J:
                    return np.array(out)
    return np.array(out)


def spline_connect_batch(start: np.ndarray, terminals: np.ndarray, steps: int, dt: float) -> np.ndarray:
    """Cubic Hermite splines from one start state to many terminals, (J, steps + 1, 5)."""
    if steps < 2:
        raise ValueError("steps must be >= 2")
    start = np.asarray(start, float)
    terminals = np.atleast_2d(np.asarray(terminals, float))
    T = steps * dt
    tau = np.linspace(0.0, 1.0, steps + 1)
    p0 = start[:2]
    p1 = terminals[:, :2]
    m0 = start[SPEED] * T * np.array([math.cos(start[HEADING]), math.sin(start[HEADING])])
    m1 = (terminals[:, SPEED] * T)[:, None] * np.stack([np.cos(terminals[:, HEADING]),
                                                         np.sin(terminals[:, HEADING])], axis=1)
    t2, t3 = tau ** 2, tau ** 3
    h00, h10, h01, h11 = 2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + tau, -2 * t3 + 3 * t2, t3 - t2
    d00, d10, d01, d11 = 6 * t2 - 6 * tau, 3 * t2 - 4 * tau + 1, -6 * t2 + 6 * tau, 3 * t2 - 2 * tau
    pos = (h00[None, :, None] * p0 + h10[None, :, None] * m0 + h01[None, :, None] * p1[:, None]
           + h11[None, :, None] * m1[:, None])
    vel = (d00[None, :, None] * p0 + d10[None, :, None] * m0 + d01[None, :, None] * p1[:, None]
           + d11[None, :, None] * m1[:, None]) / T
    speed = np.hypot(vel[..., 0], vel[..., 1])
    heading = np.arctan2(vel[..., 1], vel[..., 0])
    # where the tangent vanishes, hold the last defined heading (start heading at first)
    J = len(terminals)
    still = speed < 1e-9
    if still.any():
        for j in range(J):
            prev = start[HEADING]
            for k in range(steps + 1):
                if still[j, k]:
                    heading[j, k] = prev
                prev = heading[j, k]
    out = np.empty((J, steps + 1, 5))
    out[..., X], out[..., Y] = pos[..., 0], pos[..., 1]
    out[..., HEADING] = wrap_angles(heading)
    out[..., SPEED] = speed
    acc = np.diff(speed, axis=1) / dt
    out[:, :-1, ACCEL] = acc
    out[:, -1, ACCEL] = acc[:, -1]
    return out


def spline_connect(ego_state: np.ndarray, terminal: np.ndarray, steps: int, dt: float,
                   agent_id: str = "ego", start_step: int = 0) -> Trajectory:
    data = spline_connect_batch(ego_state, np.asarray(terminal, float)[None], steps, dt)[0]
    return Trajectory(agent_id, start_step, dt, data)


def braking_trajectory(ego_state: np.ndarray, steps: int, dt: float, limits: ControlLimits) -> np.ndarray:
    """Straight-line maximum braking to a stop, (steps + 1, 5)."""
    s = np.asarray(ego_state, float)
    t = np.arange(steps + 1) * dt
    v0, a = float(s[SPEED]), limits.min_accel
    t_stop = v0 / -a
    tc = np.minimum(t, t_stop)
    dist = v0 * tc + 0.5 * a * tc ** 2
    out = np.zeros((steps + 1, 5))
    out[:, X] = s[X] + dist * math.cos(s[HEADING])
    out[:, Y] = s[Y] + dist * math.sin(s[HEADING])
    out[:, HEADING] = s[HEADING]
    out[:, SPEED] = np.maximum(v0 + a * t, 0.0)
    out[:-1, ACCEL] = np.diff(out[:, SPEED]) / dt
    out[-1, ACCEL] = 0.0
    return out


# --- costs -------------------------------------------------------------------------------


def cost_components(candidates: np.ndarray, lane_graph: LaneGraph, goal_xy: np.ndarray,
                    weights: CostWeights = CostWeights()) -> np.ndarray:
    """(J, 4) heading, lane_dev, effort and goal terms for (J, n, 5) candidates."""
    c = np.asarray(candidates, float)
    if c.ndim == 2:
        c = c[None]
    if lane_graph.lanes:
        _, _, _, lane_h, lateral = lane_graph.nearest(c[..., :2])
        heading = weights.w_hd * np.sum(wrap_angles(c[..., HEADING] - lane_h) ** 2, axis=1)
        lane_dev = weights.w_vd * np.sum(lateral ** 2, axis=1)
    else:
        heading = np.zeros(len(c))
        lane_dev = np.zeros(len(c))
    effort = weights.w_ef * np.sum(c[..., ACCEL] ** 2, axis=1)
    goal = weights.w_goal * np.hypot(c[:, -1, X] - goal_xy[0], c[:, -1, Y] - goal_xy[1])
    return np.stack([heading, lane_dev, effort, goal], axis=1)


def rbf_sum(candidates: np.ndarray, others: np.ndarray, sigma: float,
            weights: Optional[np.ndarray] = None) -> np.ndarray:
    """Σ_i w_i Σ_τ exp(-|c_τ - o_iτ|² / 2σ²) for every candidate; NaN positions contribute 0."""
    c = np.asarray(candidates, float)[..., :2]
    o = np.asarray(others, float)
    if len(o) == 0:
        return np.zeros(len(c))
    o = o[..., :2]
    if c.shape[1] != o.shape[1]:
        raise ValueError(f"trajectory lengths differ: {c.shape[1]} vs {o.shape[1]}")
    dx = c[:, None, :, 0] - o[None, :, :, 0]
    dy = c[:, None, :, 1] - o[None, :, :, 1]
    phi = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    phi = np.where(np.isnan(phi), 0.0, phi).sum(axis=2)
    if weights is None:
        return phi.sum(axis=1)
    return phi @ np.asarray(weights, float)


def collision_cost(candidate, visible_futures: Sequence, predicted: Sequence = (),
                   weights: CostWeights = CostWeights()):
    """w_col · (Σ_visible Σ_τ φ + Σ_k π_k Σ_τ φ) with a Gaussian RBF φ on position differences.

    ``candidate`` may be a Trajectory, an (n, 5) array or a (J, n, 5) batch;
    ``predicted`` holds WeightedTrajectory items or (states, weight) pairs.
    """
    single = False
    if isinstance(candidate, Trajectory):
        c, single = candidate.data[None], True
    else:
        c = np.asarray(candidate, float)
        if c.ndim == 2:
            c, single = c[None], True
    vis = _stack([v.data if isinstance(v, Trajectory) else v for v in visible_futures], c.shape[1])
    if predicted:
        pairs = [(p.trajectory.data, p.weight) if hasattr(p, "trajectory") else p for p in predicted]
        pred = _stack([p[0] for p in pairs], c.shape[1])
        w = np.array([p[1] for p in pairs], float)
    else:
        pred, w = np.zeros((0, c.shape[1], 2)), np.zeros(0)
    out = weights.w_col * (rbf_sum(c, vis, weights.rbf_sigma) + rbf_sum(c, pred, weights.rbf_sigma, w))
    return float(out[0]) if single else out


def _stack(arrays: Sequence[np.ndarray], n: int) -> np.ndarray:
    if not len(arrays):
        return np.zeros((0, n, 2))
    out = np.stack([np.asarray(a, float)[:, :2] for a in arrays]) if all(
        len(a) == len(arrays[0]) for a in arrays) else None
    if out is None:
        raise ValueError("trajectories are not time-aligned")
    if out.shape[1] != n:
        raise ValueError(f"trajectory lengths differ: {n} vs {out.shape[1]}")
    return out


# --- planning -------------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanResult:
    mode: PlannerMode
    step: int
    index: int
    candidate_states: np.ndarray  # (J, n, 5) world frame
    costs: np.ndarray  # (J, 5) heading, lane_dev, effort, collision, goal
    totals: np.ndarray  # (J,)
    occluded_samples_used: int
    emergency: bool = False

    @property
    def chosen(self) -> Trajectory:
        return Trajectory("ego", self.step, DT, self.candidate_states[self.index])

    @property
    def chosen_cost(self) -> CostBreakdown:
        return CostBreakdown.from_row(self.costs[self.index])

    @property
    def candidates(self) -> list[tuple[Trajectory, CostBreakdown]]:
        return [(Trajectory("ego", self.step, DT, s), CostBreakdown.from_row(c))
                for s, c in zip(self.candidate_states, self.costs)]


def select(totals: np.ndarray) -> int:
    """argmin with first-index tie-break."""
    return int(np.argmin(totals))


def agent_futures(scene: Scene, step: int, n: int, ids: Optional[Sequence[str]] = None) -> np.ndarray:
    """(N, n, 2) ground-truth positions over [step, step + n), NaN where an agent is absent."""
    rows = []
    for a in scene.agents:
        if ids is not None and a.id not in ids:
            continue
        w = a.trajectory.window(step, step + n - 1)
        if np.all(np.isnan(w[:, 0])):
            continue
        rows.append(w[:, :2])
    return np.stack(rows) if rows else np.zeros((0, n, 2))


def ego_goal(scene: Scene, step: int, horizon_steps: int) -> np.ndarray:
    tr = scene.ego.trajectory
    k = min(step + horizon_steps, tr.end_step - 1) - tr.start_step
    return tr.data[k, :2].copy()


class PlanningContext:
    """Everything about one planning step that does not depend on the mode.

    All modes planned from one context share the candidate set exactly.
    """

    def __init__(self, scene: Scene, step: int, config: PlannerConfig = PlannerConfig(),
                 models: Optional[PlannerModels] = None, ego_state: Optional[np.ndarray] = None):
        self.scene, self.step, self.config = scene, step, config
        self.models = models or PlannerModels()
        if ego_state is None:
            tr = scene.ego.trajectory
            if not tr.covers(step, step):
                raise IndexError(f"ego not present at step {step}")
            ego_state = tr.data[step - tr.start_step]
        self.ego_state = np.array(ego_state, float)
        self.pose = tuple(float(v) for v in self.ego_state[[X, Y, HEADING]])
        n = config.horizon_steps + 1
        self.footprints = snapshot(scene, step, self.ego_state)
        G = config.grid
        self.view: View = observe(self.footprints, scene.ego.id, self.pose, G, G)
        hidden = {fp.id for fp in hidden_agents(self.view, self.footprints, scene.ego.id)}
        present = {fp.id for fp in self.footprints} - {scene.ego.id}
        self.hidden_ids = tuple(sorted(hidden))
        self.visible_futures = agent_futures(scene, step, n, present - hidden)
        self.all_futures = agent_futures(scene, step, n)
        self.goal = ego_goal(scene, step, config.horizon_steps)
        terminals = sample_terminals(scene.lane_graph, self.ego_state, config.n_candidates, config.horizon_s,
                                     config.limits, config.lateral_offsets, config.speed_fractions)
        cands = spline_connect_batch(self.ego_state, terminals, config.horizon_steps, config.dt) \
            if len(terminals) else np.zeros((0, n, 5))
        keep = feasibility_mask(cands, config.dt, config.limits) if len(cands) else np.zeros(0, bool)
        self.emergency = not keep.any()
        self.candidates = cands[keep] if not self.emergency else \
            braking_trajectory(self.ego_state, config.horizon_steps, config.dt, config.limits)[None]
        self.candidates.setflags(write=False)
        w = config.weights
        self.base_costs = cost_components(self.candidates, scene.lane_graph, self.goal, w)
        self.visible_collision = rbf_sum(self.candidates, self.visible_futures, w.rbf_sigma)
        self.all_collision = rbf_sum(self.candidates, self.all_futures, w.rbf_sigma)

    @property
    def observed(self) -> OccupancyGrid:
        return self.view.observed

    @cached_property
    def road(self):
        G = self.config.grid
        return rasterize_road(self.scene.drivable_polygons, self.pose, G, G)

    @cached_property
    def fused(self) -> OccupancyGrid:
        if self.models.driver_sensor is None:
            raise RuntimeError("a DriverSensor model is required for the fused grid")
        return fused_ego_grid(self.models.driver_sensor, self.scene, self.step, self.view, self.scene.ego.id)

    def to_world(self, states: np.ndarray) -> np.ndarray:
        out = np.array(states, float)
        if len(out):
            out[..., :2] = frame_to_world(out[..., :2], self.pose)
            out[..., HEADING] = wrap_angles(out[..., HEADING] + self.pose[2])
        return out

    def predicted(self, mode: PlannerMode, rng: np.random.Generator, pi_e: Optional[float] = None):
        """Mode-specific occluded predictions as (world states (M, n, 5), weights (M,))."""
        cfg = self.config
        pi_e = cfg.pi_e if pi_e is None else pi_e
        n = cfg.horizon_steps + 1
        empty = (np.zeros((0, n, 5)), np.zeros(0))
        if mode in (PlannerMode.NO_REASONING, PlannerMode.ORACLE):
            return empty
        if mode in (PlannerMode.BIVO, PlannerMode.CVAE_ONLY):
            model = self.models.generator if mode is PlannerMode.BIVO else self.models.generator_observed
            if model is None:
                raise RuntimeError(f"{mode} needs a trained generator")
            cond = self.fused if mode is PlannerMode.BIVO else self.observed
            states, w = sample_trajectory_arrays(model, self.road, cond, self.observed, cfg.n_samples, pi_e,
                                                 cfg.limits, rng, cfg.standard_normal)
            return self.to_world(states), np.full(len(states), w)
        if mode is PlannerMode.DRIVER_SENSOR_HEURISTIC:
            return self._heuristic_agents(pi_e)
        raise ValueError(f"unknown mode {mode}")

    def _heuristic_agents(self, pi_e: float):
        cfg = self.config
        n = cfg.horizon_steps + 1
        fused = self.fused.values
        cand = (self.observed.values == OCCLUDED) & (fused > cfg.dsh_threshold)
        flat = np.flatnonzero(cand.ravel())
        if len(flat) == 0:
            return np.zeros((0, n, 5)), np.zeros(0)
        order = flat[np.argsort(-fused.ravel()[flat], kind="stable")][:cfg.dsh_top]
        G = cfg.grid
        centers = cell_centers(G, G).reshape(-1, 2)[order]
        world = frame_to_world(centers, self.pose)
        if self.scene.lane_graph.lanes:
            heading = self.scene.lane_graph.nearest(world)[3]
        else:
            heading = np.full(len(world), self.pose[2])
        t = np.arange(n) * cfg.dt * cfg.dsh_speed
        states = np.zeros((len(world), n, 5))
        states[..., X] = world[:, 0:1] + np.cos(heading)[:, None] * t
        states[..., Y] = world[:, 1:2] + np.sin(heading)[:, None] * t
        states[..., HEADING] = heading[:, None]
        states[..., SPEED] = cfg.dsh_speed
        return states, np.full(len(world), pi_e / len(world))

    def evaluate(self, mode: PlannerMode, rng: np.random.Generator, pi_e: Optional[float] = None) -> PlanResult:
        mode = PlannerMode(mode)
        w = self.config.weights
        pred, pw = self.predicted(mode, rng, pi_e)
        vis = self.all_collision if mode is PlannerMode.ORACLE else self.visible_collision
        collision = w.w_col * (vis + rbf_sum(self.candidates, pred, w.rbf_sigma, pw))
        b = self.base_costs
        costs = np.stack([b[:, 0], b[:, 1], b[:, 2], collision, b[:, 3]], axis=1)
        totals = total_of(costs[:, 0], costs[:, 1], costs[:, 2], costs[:, 3], costs[:, 4])
        return PlanResult(mode, self.step, select(totals), self.candidates, costs, totals, len(pred),
                          self.emergency)

    def hindsight(self, states: np.ndarray) -> CostBreakdown:
        return hindsight_cost_states(states, self.scene, self.step, self.config)


def hindsight_cost_states(states: np.ndarray, scene: Scene, step: int,
                          config: PlannerConfig = PlannerConfig()) -> CostBreakdown:
    states = np.asarray(states, float)
    n = len(states)
    w = config.weights
    base = cost_components(states[None], scene.lane_graph, ego_goal(scene, step, n - 1), w)[0]
    col = w.w_col * rbf_sum(states[None], agent_futures(scene, step, n), w.rbf_sigma)[0]
    return CostBreakdown(float(base[0]), float(base[1]), float(base[2]), float(col), float(base[3]))


def plan(scene: Scene, step: int, mode: PlannerMode | str, models: Optional[PlannerModels] = None,
         config: PlannerConfig = PlannerConfig(), rng: Optional[np.random.Generator] = None,
         ego_state: Optional[np.ndarray] = None) -> PlanResult:
    rng = rng if rng is not None else np.random.default_rng(0)
    return PlanningContext(scene, step, config, models, ego_state).evaluate(PlannerMode(mode), rng)
