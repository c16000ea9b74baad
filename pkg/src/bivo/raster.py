"""Occupancy rasters, line-of-sight visibility and occluded-trajectory mining.

Grid convention: cell ``(r, c)`` of an ``H x W`` grid covers the viewer-frame
square ``x in [(c - W//2) * res, (c - W//2 + 1) * res)`` and likewise for
``y`` with rows, so the viewer pose sits on the corner shared by the four
centre cells and the viewer cell is ``(H//2, W//2)``. ``x`` points along the
viewer heading, ``y`` to its left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from matplotlib.path import Path as MplPath

from .world import (HEADING, X, Y, Agent, AgentState, RoadRaster, Scene, Trajectory,
                    frame_to_world, world_to_frame, wrap_angles)

OCCLUDED = 0.5
EGO_GRID = (120, 120)
AGENT_GRID = (30, 30)
RAY_SUBSTEPS = 10
_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    center_pose: tuple[float, float, float]
    values: np.ndarray
    resolution: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ValueError("occupancy grid must be 2-D")
        if np.any(v < 0.0) or np.any(v > 1.0):
            raise ValueError("occupancy values must lie in [0, 1]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "center_pose", tuple(float(p) for p in self.center_pose))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def viewer_cell(self) -> tuple[int, int]:
        return self.values.shape[0] // 2, self.values.shape[1] // 2

    def cells_of(self, xy_world: np.ndarray):
        """(rows, cols, inside) for world points."""
        return frame_cells(world_to_frame(np.asarray(xy_world, float), self.center_pose),
                           *self.shape, self.resolution)

    def value_at(self, xy_world) -> float:
        r, c, inside = self.cells_of(np.asarray(xy_world, float)[None])
        return float(self.values[r[0], c[0]]) if inside[0] else math.nan


@dataclass(frozen=True)
class Footprint:
    id: str
    state: np.ndarray  # (5,)
    length: float
    width: float


@dataclass(frozen=True, eq=False)
class OccludedSample:
    trajectory: Trajectory  # ego frame, origin plus horizon steps
    road_raster: RoadRaster
    observed_grid: OccupancyGrid
    fused_grid: Optional[OccupancyGrid] = None
    step: int = 0
    scene_id: str = ""


@dataclass(frozen=True, eq=False)
class View:
    """Everything the viewer can see at one step."""
    observed: OccupancyGrid
    truth: np.ndarray  # (H, W) bool
    visible: np.ndarray  # (H, W) bool
    footprints: dict  # agent id -> flat cell indices inside the grid

    def agent_visible(self, agent_id: str) -> bool:
        cells = self.footprints.get(agent_id)
        return cells is not None and len(cells) > 0 and bool(self.visible.ravel()[cells].any())


# --- geometry helpers -----------------------------------------------------


def frame_cells(xy: np.ndarray, H: int, W: int, res: float = 1.0):
    c = np.floor(xy[..., 0] / res).astype(np.int64) + W // 2
    r = np.floor(xy[..., 1] / res).astype(np.int64) + H // 2
    inside = (r >= 0) & (r < H) & (c >= 0) & (c < W)
    return np.clip(r, 0, H - 1), np.clip(c, 0, W - 1), inside


@lru_cache(maxsize=16)
def cell_centers(H: int, W: int, res: float = 1.0) -> np.ndarray:
    """(H, W, 2) viewer-frame coordinates of every cell centre."""
    xs = (np.arange(W) - W // 2 + 0.5) * res
    ys = (np.arange(H) - H // 2 + 0.5) * res
    out = np.stack(np.meshgrid(xs, ys), axis=-1)
    out.setflags(write=False)
    return out


def snapshot(scene: Scene, step: int, ego_state: Optional[np.ndarray] = None) -> list[Footprint]:
    """Footprints of every agent present at ``step``; the ego can be overridden (closed loop)."""
    out = []
    for agent in scene.all_agents():
        if agent is scene.ego and ego_state is not None:
            out.append(Footprint(agent.id, np.asarray(ego_state, float), agent.length, agent.width))
            continue
        tr = agent.trajectory
        if tr.start_step <= step < tr.end_step:
            out.append(Footprint(agent.id, tr.data[step - tr.start_step], agent.length, agent.width))
    return out


def footprint_cells(fp: Footprint, pose: Sequence[float], H: int, W: int, res: float = 1.0) -> np.ndarray:
    """Flat indices of cells whose square overlaps the oriented footprint with positive area."""
    center = world_to_frame(fp.state[None, :2], pose)[0]
    theta = fp.state[HEADING] - pose[2]
    ct, st = math.cos(theta), math.sin(theta)
    a, b = fp.length / 2.0, fp.width / 2.0
    ext_x = a * abs(ct) + b * abs(st)
    ext_y = a * abs(st) + b * abs(ct)
    c_lo = max(int(math.floor((center[0] - ext_x) / res)) + W // 2, 0)
    c_hi = min(int(math.floor((center[0] + ext_x) / res)) + W // 2, W - 1)
    r_lo = max(int(math.floor((center[1] - ext_y) / res)) + H // 2, 0)
    r_hi = min(int(math.floor((center[1] + ext_y) / res)) + H // 2, H - 1)
    if c_lo > c_hi or r_lo > r_hi:
        return np.zeros(0, dtype=np.int64)
    rr, cc = np.meshgrid(np.arange(r_lo, r_hi + 1), np.arange(c_lo, c_hi + 1), indexing="ij")
    half = 0.5 * res
    dx = (cc - W // 2 + 0.5) * res - center[0]
    dy = (rr - H // 2 + 0.5) * res - center[1]
    # separating axis test; touching edges do not count as overlap
    ok = (np.abs(dx) < half + ext_x - _EPS) & (np.abs(dy) < half + ext_y - _EPS)
    proj_u = dx * ct + dy * st
    proj_v = -dx * st + dy * ct
    ok &= np.abs(proj_u) < a + half * (abs(ct) + abs(st)) - _EPS
    ok &= np.abs(proj_v) < b + half * (abs(st) + abs(ct)) - _EPS
    return (rr[ok] * W + cc[ok]).astype(np.int64)


def rasterize_footprints(footprints: Iterable[Footprint], pose: Sequence[float], H: int, W: int,
                         exclude_id: Optional[str] = None, res: float = 1.0):
    grid = np.zeros(H * W, dtype=bool)
    cells = {}
    for fp in footprints:
        if fp.id == exclude_id:
            continue
        idx = footprint_cells(fp, pose, H, W, res)
        cells[fp.id] = idx
        grid[idx] = True
    return grid.reshape(H, W), cells


def rasterize_scene(scene: Scene, step: int, frame: AgentState, H: int, W: int,
                    exclude_id: Optional[str] = None) -> OccupancyGrid:
    """Binary occupancy of every agent footprint except ``exclude_id`` in the frame's grid."""
    pose = (frame.x, frame.y, frame.heading)
    grid, _ = rasterize_footprints(snapshot(scene, step), pose, H, W, exclude_id)
    return OccupancyGrid(pose, grid.astype(float))


# --- line of sight --------------------------------------------------------


def ray_cells(r0: int, c0: int, r1: int, c1: int, substeps: int = RAY_SUBSTEPS) -> list[tuple[int, int]]:
    """Integer traversal from cell (r0, c0) to (r1, c1).

    Samples the segment between cell centres every ``1/substeps`` of a cell
    along the dominant axis with exact integer rounding (half-way points go
    to the higher cell) and keeps each newly entered cell once.
    """
    dr, dc = r1 - r0, c1 - c0
    n = max(abs(dr), abs(dc))
    if n == 0:
        return [(r0, c0)]
    den = 2 * substeps * n
    out = [(r0, c0)]
    for s in range(1, substeps * n + 1):
        cell = (r0 + (2 * s * dr + substeps * n) // den, c0 + (2 * s * dc + substeps * n) // den)
        if cell != out[-1]:
            out.append(cell)
    return out


def boundary_cells(H: int, W: int) -> list[tuple[int, int]]:
    cells = [(0, c) for c in range(W)]
    if H > 1:
        cells += [(H - 1, c) for c in range(W)]
    cells += [(r, 0) for r in range(1, H - 1)]
    if W > 1:
        cells += [(r, W - 1) for r in range(1, H - 1)]
    return cells


@lru_cache(maxsize=32)
def _ray_table(H: int, W: int, vr: int, vc: int) -> np.ndarray:
    rays = []
    for r1, c1 in boundary_cells(H, W):
        cells = ray_cells(vr, vc, r1, c1)[1:]
        rays.append([r * W + c for r, c in cells])
    width = max((len(r) for r in rays), default=0)
    table = np.full((len(rays), max(width, 1)), -1, dtype=np.int64)
    for i, r in enumerate(rays):
        table[i, :len(r)] = r
    table.setflags(write=False)
    return table


def visibility_mask(grid: np.ndarray, viewer_cell: tuple[int, int]) -> np.ndarray:
    """Cells reached by a ray from the viewer to each boundary cell before it is blocked.

    The first occupied cell on a ray is visible itself; the viewer cell is
    always visible and never blocks.
    """
    occ = np.asarray(grid) > 0.5
    H, W = occ.shape
    vr, vc = viewer_cell
    if not (0 <= vr < H and 0 <= vc < W):
        raise ValueError("viewer cell outside grid")
    table = _ray_table(H, W, vr, vc)
    valid = table >= 0
    hit = np.where(valid, occ.ravel()[np.where(valid, table, 0)], False)
    blocked_before = (np.cumsum(hit, axis=1) - hit) > 0
    seen = valid & ~blocked_before
    vis = np.zeros(H * W, dtype=bool)
    vis[table[seen]] = True
    vis[vr * W + vc] = True
    return vis.reshape(H, W)


def observe(footprints: Sequence[Footprint], viewer_id: str, pose: Sequence[float],
            H: int, W: int) -> View:
    truth, cells = rasterize_footprints(footprints, pose, H, W, exclude_id=viewer_id)
    vis = visibility_mask(truth, (H // 2, W // 2))
    values = np.where(vis, truth.astype(float), OCCLUDED)
    return View(OccupancyGrid(tuple(pose), values), truth, vis, cells)


def _viewer_pose(scene: Scene, step: int, viewer: Agent) -> tuple[float, float, float]:
    tr = viewer.trajectory
    if not tr.start_step <= step < tr.end_step:
        raise IndexError(f"viewer {viewer.id} not present at step {step}")
    s = tr.data[step - tr.start_step]
    return float(s[X]), float(s[Y]), float(s[HEADING])


def build_observed_ogm(scene: Scene, step: int, viewer: Agent, H: int = EGO_GRID[0],
                       W: int = EGO_GRID[1]) -> OccupancyGrid:
    return observe(snapshot(scene, step), viewer.id, _viewer_pose(scene, step, viewer), H, W).observed


def build_ground_truth_ogm(scene: Scene, step: int, viewer: Agent, H: int = AGENT_GRID[0],
                           W: int = AGENT_GRID[1]) -> OccupancyGrid:
    pose = _viewer_pose(scene, step, viewer)
    truth, _ = rasterize_footprints(snapshot(scene, step), pose, H, W, exclude_id=viewer.id)
    return OccupancyGrid(pose, truth.astype(float))


# --- road -----------------------------------------------------------------


def rasterize_road(polygons: Sequence[np.ndarray], pose: Sequence[float], H: int, W: int) -> RoadRaster:
    """Drivable mask: a cell is drivable when its centre lies in any polygon."""
    pts = frame_to_world(cell_centers(H, W).reshape(-1, 2), pose)
    inside = np.zeros(len(pts), dtype=bool)
    for poly in polygons:
        poly = np.asarray(poly, float)
        lo, hi = poly.min(axis=0), poly.max(axis=0)
        cand = np.all((pts >= lo) & (pts <= hi), axis=1) & ~inside
        if cand.any():
            inside[cand] = MplPath(poly).contains_points(pts[cand])
    return RoadRaster(tuple(float(p) for p in pose), inside.reshape(H, W))


# --- occluded sample mining -----------------------------------------------


def hidden_agents(view: View, footprints: Sequence[Footprint], viewer_id: str) -> list[Footprint]:
    """Agents whose origin cell is occluded and none of whose footprint is visible."""
    H, W = view.observed.shape
    out = []
    for fp in footprints:
        if fp.id == viewer_id:
            continue
        r, c, inside = frame_cells(world_to_frame(fp.state[None, :2], view.observed.center_pose), H, W)
        if not inside[0] or view.observed.values[r[0], c[0]] != OCCLUDED:
            continue
        if view.agent_visible(fp.id):
            continue
        out.append(fp)
    return out


def to_frame_trajectory(world_states: np.ndarray, pose: Sequence[float], agent_id: str,
                        start_step: int, dt: float) -> Trajectory:
    data = np.array(world_states, dtype=float)
    data[:, :2] = world_to_frame(data[:, :2], pose)
    data[:, HEADING] = wrap_angles(data[:, HEADING] - pose[2])
    return Trajectory(agent_id, start_step, dt, data)


def extract_occluded_samples(scene: Scene, H: int = EGO_GRID[0], W: int = EGO_GRID[1],
                             horizon_steps: int = 10, steps: Optional[Iterable[int]] = None,
                             with_road: bool = True) -> list[OccludedSample]:
    """Future trajectories of agents that start hidden from the ego, in the ego frame."""
    ego = scene.ego
    if steps is None:
        steps = range(scene.duration_steps)
    samples = []
    for t in steps:
        if not ego.trajectory.covers(t, t):
            continue
        candidates = [a for a in scene.agents if a.trajectory.covers(t, t + horizon_steps)]
        if not candidates:
            continue
        fps = snapshot(scene, t)
        pose = _viewer_pose(scene, t, ego)
        view = observe(fps, ego.id, pose, H, W)
        if not np.any(view.observed.values == OCCLUDED):
            continue
        hidden = {fp.id for fp in hidden_agents(view, fps, ego.id)}
        road = None
        for agent in candidates:
            if agent.id not in hidden:
                continue
            if road is None:
                road = rasterize_road(scene.drivable_polygons, pose, H, W) if with_road \
                    else RoadRaster(pose, np.zeros((H, W), bool))
            fut = agent.trajectory.window(t, t + horizon_steps)
            samples.append(OccludedSample(to_frame_trajectory(fut, pose, agent.id, t, scene.dt),
                                          road, view.observed, None, t, scene.id))
    return samples


def attach_fused(sample: OccludedSample, fused: OccupancyGrid) -> OccludedSample:
    return replace(sample, fused_grid=fused)


# --- export ---------------------------------------------------------------


def grid_to_bytes(values: np.ndarray) -> np.ndarray:
    """0 -> 0 (free), 0.5 -> 128 (occluded), 1 -> 255 (occupied); probabilities scale linearly."""
    return np.floor(np.clip(values, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path, grid: OccupancyGrid | np.ndarray) -> Path:
    """Binary portable graymap, one byte per cell, +y pointing up in the image."""
    values = grid.values if isinstance(grid, OccupancyGrid) else np.asarray(grid, float)
    img = grid_to_bytes(values)[::-1]
    path = Path(path)
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    W, H = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)[::-1].copy()
