"""Scene representation: agent states, trajectories, lanes, road raster, frames."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

TWO_PI = 2.0 * math.pi
DT = 0.5
HORIZON_STEPS = 10
AGENT_CLASSES = ("vehicle", "pedestrian", "cyclist")

# column layout of the (n, 5) state arrays used everywhere
X, Y, HEADING, SPEED, ACCEL = range(5)


def normalize_angle(angle: float) -> float:
    """Wrap an angle into [-pi, pi). Values already in range are returned untouched."""
    if -math.pi <= angle < math.pi:
        return angle
    wrapped = math.fmod(angle + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    wrapped -= math.pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    if wrapped < -math.pi:
        wrapped = -math.pi
    return wrapped


def wrap_angles(angles: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_angle`; in-range entries are left bit-identical."""
    out = np.array(angles, dtype=float)
    bad = (out < -np.pi) | (out >= np.pi)
    if np.any(bad):
        w = np.mod(out[bad] + np.pi, TWO_PI) - np.pi
        w[w >= np.pi] -= TWO_PI
        out[bad] = w
    return out


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float = 0.0
    accel: float = 0.0

    def __post_init__(self):
        if not self.speed >= 0.0:
            raise ValueError(f"speed must be non-negative, got {self.speed}")
        object.__setattr__(self, "heading", normalize_angle(float(self.heading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed, self.accel], dtype=float)

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "AgentState":
        return cls(float(row[0]), float(row[1]), float(row[2]), max(float(row[3]), 0.0), float(row[4]))


class Trajectory:
    """Fixed-dt sequence of states starting at ``start_step``.

    States are held in a read-only ``(n, 5)`` array with columns
    x, y, heading, speed, accel.
    """

    __slots__ = ("agent_id", "start_step", "dt", "_data")

    def __init__(self, agent_id: str, start_step: int, dt: float, data):
        arr = np.array(data, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 5 or arr.shape[0] < 1:
            raise ValueError(f"trajectory data must have shape (n>=1, 5), got {arr.shape}")
        if not dt > 0:
            raise ValueError("dt must be positive")
        arr[:, HEADING] = wrap_angles(arr[:, HEADING])
        arr.setflags(write=False)
        self.agent_id = str(agent_id)
        self.start_step = int(start_step)
        self.dt = float(dt)
        self._data = arr

    @classmethod
    def from_states(cls, agent_id: str, start_step: int, dt: float,
                    states: Iterable[AgentState]) -> "Trajectory":
        return cls(agent_id, start_step, dt, [s.as_array() for s in states])

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def states(self) -> tuple[AgentState, ...]:
        return tuple(AgentState.from_array(r) for r in self._data)

    @property
    def end_step(self) -> int:
        """One past the last stored step."""
        return self.start_step + len(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def covers(self, first: int, last: int) -> bool:
        return self.start_step <= first and last < self.end_step

    def window(self, first: int, last: int) -> np.ndarray:
        """States for steps first..last inclusive; rows outside the trajectory are NaN."""
        out = np.full((last - first + 1, 5), np.nan)
        lo = max(first, self.start_step)
        hi = min(last, self.end_step - 1)
        if lo <= hi:
            out[lo - first:hi - first + 1] = self._data[lo - self.start_step:hi - self.start_step + 1]
        return out

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.agent_id == other.agent_id and self.start_step == other.start_step
                and self.dt == other.dt and np.array_equal(self._data, other._data))

    def __repr__(self):
        return f"Trajectory({self.agent_id!r}, start={self.start_step}, n={len(self)}, dt={self.dt})"


@dataclass(frozen=True)
class Agent:
    id: str
    kind: str
    length: float
    width: float
    trajectory: Trajectory

    def __post_init__(self):
        if self.kind not in AGENT_CLASSES:
            raise ValueError(f"unknown agent class {self.kind!r}")
        if not (self.length > 0 and self.width > 0):
            raise ValueError("agent footprint must be positive")


@dataclass(frozen=True, eq=False)
class Lane:
    id: str
    centerline: np.ndarray  # (n, 3): x, y, heading
    successors: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "centerline", np.asarray(self.centerline, dtype=float))
        object.__setattr__(self, "successors", tuple(self.successors))

    @cached_property
    def arc_length(self) -> np.ndarray:
        seg = np.hypot(*np.diff(self.centerline[:, :2], axis=0).T)
        return np.concatenate([[0.0], np.cumsum(seg)])


class LaneGraph:
    """Lanes with successor links plus nearest-centerline queries."""

    MAX_SPACING = 2.0

    def __init__(self, lanes: Sequence[Lane]):
        self.lanes = tuple(lanes)
        self.by_id = {lane.id: lane for lane in self.lanes}
        if len(self.by_id) != len(self.lanes):
            raise ValueError("duplicate lane ids")
        for lane in self.lanes:
            cl = np.asarray(lane.centerline, dtype=float)
            if cl.ndim != 2 or cl.shape[1] != 3 or len(cl) < 2:
                raise ValueError(f"lane {lane.id}: centerline must be (n>=2, 3)")
            if np.any(np.hypot(*np.diff(cl[:, :2], axis=0).T) > self.MAX_SPACING + 1e-9):
                raise ValueError(f"lane {lane.id}: centerline spacing exceeds {self.MAX_SPACING} m")
            for s in lane.successors:
                if s not in self.by_id:
                    raise ValueError(f"lane {lane.id}: unknown successor {s!r}")

    @cached_property
    def _points(self):
        pts = np.concatenate([lane.centerline for lane in self.lanes]) if self.lanes else np.zeros((0, 3))
        lane_idx = np.concatenate([np.full(len(l.centerline), i) for i, l in enumerate(self.lanes)]) \
            if self.lanes else np.zeros(0, int)
        point_idx = np.concatenate([np.arange(len(l.centerline)) for l in self.lanes]) \
            if self.lanes else np.zeros(0, int)
        return pts, lane_idx, point_idx, cKDTree(pts[:, :2]) if len(pts) else None

    def nearest(self, xy: np.ndarray):
        """Nearest centerline point for each query point.

        Returns (distance, lane index, point index, lane heading, signed lateral
        offset), each shaped like the leading dims of ``xy``.
        """
        xy = np.asarray(xy, dtype=float)
        pts, lane_idx, point_idx, tree = self._points
        flat = xy.reshape(-1, 2)
        dist, idx = tree.query(flat)
        p = pts[idx]
        dx, dy = flat[:, 0] - p[:, 0], flat[:, 1] - p[:, 1]
        lateral = -np.sin(p[:, 2]) * dx + np.cos(p[:, 2]) * dy
        shape = xy.shape[:-1]
        return (dist.reshape(shape), lane_idx[idx].reshape(shape), point_idx[idx].reshape(shape),
                p[:, 2].reshape(shape), lateral.reshape(shape))


@dataclass(frozen=True, eq=False)
class RoadRaster:
    origin: tuple[float, float, float]  # x, y, heading of the grid center
    cells: np.ndarray  # (H, W) bool, True = drivable
    resolution: float = 1.0

    def __post_init__(self):
        if self.resolution != 1.0:
            raise ValueError("road raster resolution must be 1 m")
        if self.cells.ndim != 2 or min(self.cells.shape) <= 0:
            raise ValueError("road raster must be a non-empty 2-D grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape


@dataclass(frozen=True)
class ControlLimits:
    max_accel: float = 4.0
    min_accel: float = -8.0
    max_speed: float = 20.0
    max_curvature: float = 0.3

    def __post_init__(self):
        if not self.min_accel < 0 < self.max_accel:
            raise ValueError("limits require min_accel < 0 < max_accel")


@dataclass(frozen=True, eq=False)
class Scene:
    id: str
    lane_graph: LaneGraph
    drivable_polygons: tuple[np.ndarray, ...]
    agents: tuple[Agent, ...]
    ego: Agent
    duration_steps: int
    dt: float = DT
    agent_map: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [a.id for a in self.agents]
        if self.ego.id in ids:
            raise ValueError("ego id must be distinct from agent ids")
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate agent ids")
        for a in (*self.agents, self.ego):
            tr = a.trajectory
            if tr.start_step < 0 or tr.end_step > self.duration_steps:
                raise ValueError(f"trajectory of {a.id} exceeds scene duration")
        object.__setattr__(self, "agent_map", {a.id: a for a in self.agents})

    def all_agents(self) -> tuple[Agent, ...]:
        return (self.ego, *self.agents)


# --- operations -----------------------------------------------------------


def state_at(traj: Trajectory, step: int) -> AgentState:
    if not traj.start_step <= step < traj.end_step:
        raise IndexError(f"step {step} outside trajectory [{traj.start_step}, {traj.end_step})")
    return AgentState.from_array(traj.data[step - traj.start_step])


def to_ego_frame(state: AgentState, ego: AgentState) -> AgentState:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    dx, dy = state.x - ego.x, state.y - ego.y
    return AgentState(c * dx + s * dy, -s * dx + c * dy, normalize_angle(state.heading - ego.heading),
                      state.speed, state.accel)


def from_ego_frame(state: AgentState, ego: AgentState) -> AgentState:
    c, s = math.cos(ego.heading), math.sin(ego.heading)
    return AgentState(ego.x + c * state.x - s * state.y, ego.y + s * state.x + c * state.y,
                      normalize_angle(state.heading + ego.heading), state.speed, state.accel)


def world_to_frame(xy: np.ndarray, pose: Sequence[float]) -> np.ndarray:
    """Vectorised rigid transform of (..., 2) world points into the frame of ``pose``."""
    c, s = math.cos(pose[2]), math.sin(pose[2])
    dx = xy[..., 0] - pose[0]
    dy = xy[..., 1] - pose[1]
    return np.stack([c * dx + s * dy, -s * dx + c * dy], axis=-1)


def frame_to_world(xy: np.ndarray, pose: Sequence[float]) -> np.ndarray:
    c, s = math.cos(pose[2]), math.sin(pose[2])
    return np.stack([pose[0] + c * xy[..., 0] - s * xy[..., 1],
                     pose[1] + s * xy[..., 0] + c * xy[..., 1]], axis=-1)


def feasibility_mask(states: np.ndarray, dt: float, limits: ControlLimits) -> np.ndarray:
    """Batched kinematic check over a (..., n, 5) state array (n >= 2).

    Curvature is heading change over travelled arc length; a step shorter
    than 1e-6 m is fine only when the heading did not change.
    """
    states = np.asarray(states, dtype=float)
    speed = states[..., SPEED]
    accel = np.diff(speed, axis=-1) / dt
    ok = np.all(speed <= limits.max_speed + 1e-9, axis=-1)
    ok &= np.all((accel >= limits.min_accel - 1e-9) & (accel <= limits.max_accel + 1e-9), axis=-1)
    dh = np.abs(wrap_angles(np.diff(states[..., HEADING], axis=-1)))
    ds = np.hypot(np.diff(states[..., X], axis=-1), np.diff(states[..., Y], axis=-1))
    short = ds < 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        curv = np.where(short, np.where(dh <= 1e-9, 0.0, np.inf), dh / np.where(short, 1.0, ds))
    ok &= np.all(curv <= limits.max_curvature + 1e-9, axis=-1)
    ok &= np.all(np.isfinite(states), axis=(-1, -2))
    return ok


def kinematically_feasible(traj: Trajectory, limits: ControlLimits) -> bool:
    if len(traj) < 2:
        raise ValueError("feasibility needs at least two states")
    return bool(feasibility_mask(traj.data, traj.dt, limits))
