"""Figures: occupancy grids with overlays, training curves, report bars."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .raster import OccupancyGrid, grid_to_bytes  # noqa: E402
from .world import world_to_frame  # noqa: E402


def grid_rgb(values: np.ndarray) -> np.ndarray:
    """(H, W, 3) image with +y up, gray levels equal to the pixmap bytes (free dark, occupied bright)."""
    g = grid_to_bytes(np.asarray(values, float))[::-1].astype(float) / 255.0
    return np.repeat(g[..., None], 3, axis=2)


def _extent(grid: OccupancyGrid):
    H, W = grid.shape
    r = grid.resolution
    return (-(W // 2) * r, (W - W // 2) * r, -(H // 2) * r, (H - H // 2) * r)


def draw_grid(ax, grid: OccupancyGrid, title: str = ""):
    ax.imshow(grid_rgb(grid.values), extent=_extent(grid), interpolation="nearest")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)


def draw_paths(ax, paths_world: np.ndarray, pose, color: str, alpha: float = 0.5, lw: float = 0.8) -> int:
    """Polylines in the frame of ``pose``; returns how many were drawn."""
    n = 0
    for p in np.asarray(paths_world, float):
        xy = world_to_frame(p[:, :2], pose)
        ax.plot(xy[:, 0], xy[:, 1], color=color, alpha=alpha, lw=lw)
        n += 1
    return n


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def render_overlays(grid: OccupancyGrid, path, title: str = "", samples: Optional[np.ndarray] = None,
                    candidates: Optional[np.ndarray] = None, chosen: Optional[np.ndarray] = None,
                    max_samples: Optional[int] = None) -> dict:
    """Grid plus optional sampled occluded trajectories (blue), candidates (gray) and the plan (red)."""
    fig, ax = plt.subplots(figsize=(6, 6))
    draw_grid(ax, grid, title)
    drawn = {"samples": 0, "candidates": 0, "chosen": 0}
    pose = grid.center_pose
    if candidates is not None:
        drawn["candidates"] = draw_paths(ax, candidates, pose, "0.6", 0.4, 0.6)
    if samples is not None:
        s = samples if max_samples is None else samples[:max_samples]
        drawn["samples"] = draw_paths(ax, s, pose, "tab:blue", 0.35, 0.8)
    if chosen is not None:
        drawn["chosen"] = draw_paths(ax, np.asarray(chosen)[None], pose, "tab:red", 1.0, 2.0)
    save_figure(fig, path)
    return drawn


def plot_curves(history: Sequence[dict], keys: Sequence[str], path, title: str = "", window: int = 25) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.array([h["step"] for h in history])
    for k in keys:
        v = np.array([h[k] for h in history], float)
        if len(v) >= window:
            v = np.convolve(v, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1:], v, label=k)
        else:
            ax.plot(steps, v, label=k)
    ax.set_xlabel("step")
    ax.legend()
    if title:
        ax.set_title(title)
    return save_figure(fig, path)


def plot_report(report, path, title: str = "mean hindsight cost") -> Path:
    subsets = [s for s in ("all", "critical", "closed") if any(s in r for r in report.rows.values())]
    modes = list(report.rows)
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / max(len(subsets), 1)
    x = np.arange(len(modes))
    for i, s in enumerate(subsets):
        vals = [report.rows[m].get(s, {}).get("mean", np.nan) for m in modes]
        ax.bar(x + i * width, vals, width, label=s)
    ax.set_xticks(x + width * (len(subsets) - 1) / 2)
    ax.set_xticklabels(modes, rotation=15)
    ax.set_ylabel("hindsight total")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return save_figure(fig, path)
