"""Open- and closed-loop replay, hindsight cost, critical scenes and reporting."""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .planner import (ALL_MODES, CostBreakdown, PlannerConfig, PlannerMode, PlannerModels, PlanningContext,
                      hindsight_cost_states)
from .world import Scene

log = logging.getLogger(__name__)

LOOPS = ("open", "closed")


@dataclass(frozen=True)
class ReplayConfig:
    horizon_s: float = 5.0
    replan_period_s: float = 0.5
    max_scene_s: float = 15.0
    modes: tuple = ALL_MODES
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.replan_period_s <= self.horizon_s:
            raise ValueError("replan period must lie in (0, horizon]")
        if self.max_scene_s <= 0:
            raise ValueError("max_scene_s must be positive")
        object.__setattr__(self, "modes", tuple(PlannerMode(m) for m in self.modes))

    def replan_steps(self, scene: Scene) -> list[int]:
        stride = max(1, int(round(self.replan_period_s / scene.dt)))
        horizon = int(round(self.horizon_s / scene.dt))
        last = min(int(round(self.max_scene_s / scene.dt)), scene.duration_steps - 1 - horizon)
        if last < 0:
            raise ValueError(f"scene {scene.id} is shorter than the planning horizon")
        return list(range(0, last, stride))


@dataclass(frozen=True)
class EvalRecord:
    scene_id: str
    step: int
    mode: str
    loop: str
    planned: CostBreakdown
    hindsight: CostBreakdown
    critical: bool
    index: int
    emergency: bool = False
    samples: int = 0
    candidates_hash: str = ""

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id, "step": self.step, "mode": self.mode, "loop": self.loop,
                "planned": self.planned.as_dict(), "hindsight": self.hindsight.as_dict(),
                "critical": self.critical, "index": self.index, "emergency": self.emergency,
                "samples": self.samples, "candidates_hash": self.candidates_hash}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        def cost(c):
            return CostBreakdown(c["heading"], c["lane_dev"], c["effort"], c["collision"], c["goal"])
        return cls(d["scene_id"], int(d["step"]), d["mode"], d["loop"], cost(d["planned"]), cost(d["hindsight"]),
                   bool(d["critical"]), int(d["index"]), bool(d.get("emergency", False)),
                   int(d.get("samples", 0)), d.get("candidates_hash", ""))

    def sort_key(self):
        return (self.loop, self.scene_id, self.step, ALL_MODES.index(PlannerMode(self.mode)))


def _planner_for(replay: ReplayConfig, planner: PlannerConfig, dt: float) -> PlannerConfig:
    steps = int(round(replay.horizon_s / dt))
    if steps == planner.horizon_steps and dt == planner.dt:
        return planner
    return replace(planner, horizon_steps=steps, dt=dt)


def step_rng(seed: int, scene_id: str, step: int, mode: PlannerMode, loop: str = "open") -> np.random.Generator:
    """Independent stream per (seed, scene, step, mode, loop), stable across runs."""
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode()), step, ALL_MODES.index(mode),
                                  LOOPS.index(loop)])


def candidates_digest(candidates: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(candidates).tobytes()).hexdigest()[:16]


def context_hindsight(ctx: PlanningContext, index: int) -> CostBreakdown:
    """Hindsight cost of candidate ``index``: the Oracle's objective on the shared candidate set."""
    b = ctx.base_costs[index]
    w = ctx.config.weights
    # adding the (empty) prediction term keeps the value bit-identical to the Oracle's evaluation
    return CostBreakdown(float(b[0]), float(b[1]), float(b[2]), float(w.w_col * (ctx.all_collision[index] + 0.0)),
                         float(b[3]))


def hindsight_cost(chosen, scene: Scene, step: int, config: PlannerConfig = PlannerConfig()) -> CostBreakdown:
    """Cost of an already chosen trajectory against every ground-truth agent, with no predictions."""
    data = chosen.data if hasattr(chosen, "data") else np.asarray(chosen, float)
    if step + len(data) > scene.duration_steps:
        raise ValueError("chosen trajectory runs past the end of the scene")
    return hindsight_cost_states(data, scene, step, config)


def critical_steps(scene: Scene, replay: ReplayConfig = ReplayConfig(),
                   planner: PlannerConfig = PlannerConfig()) -> list[int]:
    """Replan steps where the occlusion-agnostic and fully observed planners pick different candidates."""
    planner = _planner_for(replay, planner, scene.dt)
    out = []
    for step in replay.replan_steps(scene):
        ctx = PlanningContext(scene, step, planner)
        a = ctx.evaluate(PlannerMode.NO_REASONING, None).index
        b = ctx.evaluate(PlannerMode.ORACLE, None).index
        if a != b:
            out.append(step)
    return out


def detect_critical(scene: Scene, config: ReplayConfig = ReplayConfig(),
                    planner: PlannerConfig = PlannerConfig()) -> bool:
    return bool(critical_steps(scene, config, planner))


def run_open_loop(scene: Scene, modes: Optional[Sequence] = None, models: Optional[PlannerModels] = None,
                  planner: PlannerConfig = PlannerConfig(), config: ReplayConfig = ReplayConfig()) -> list[EvalRecord]:
    """Every mode plans from the recorded ego state at each replan step, on one shared candidate set."""
    modes = tuple(PlannerMode(m) for m in (modes if modes is not None else config.modes))
    planner = _planner_for(config, planner, scene.dt)
    steps = config.replan_steps(scene)
    rows, critical = [], False
    for step in steps:
        ctx = PlanningContext(scene, step, planner, models)
        digest = candidates_digest(ctx.candidates)
        nr = ctx.evaluate(PlannerMode.NO_REASONING, None).index
        orc = ctx.evaluate(PlannerMode.ORACLE, None).index
        critical |= nr != orc
        for mode in modes:
            res = ctx.evaluate(mode, step_rng(config.seed, scene.id, step, mode))
            rows.append((step, mode, res, context_hindsight(ctx, res.index), digest))
    return [EvalRecord(scene.id, step, str(mode), "open", res.chosen_cost, hs, critical, res.index,
                       res.emergency, res.occluded_samples_used, digest)
            for step, mode, res, hs, digest in rows]


@dataclass
class ClosedLoopResult:
    mode: str
    executed: np.ndarray  # (n, 5) executed ego states
    records: list = field(default_factory=list)
    emergencies: int = 0

    @property
    def duration_s(self) -> float:
        return (len(self.executed) - 1) * 0.5

    @property
    def accumulated_hindsight(self) -> float:
        return float(sum(r.hindsight.total for r in self.records))


def run_closed_loop(scene: Scene, mode, models: Optional[PlannerModels] = None,
                    planner: PlannerConfig = PlannerConfig(), config: ReplayConfig = ReplayConfig(),
                    critical: bool = False) -> ClosedLoopResult:
    """Execute the first replan period of each plan with perfect tracking, then replan."""
    mode = PlannerMode(mode)
    planner = _planner_for(config, planner, scene.dt)
    stride = max(1, int(round(config.replan_period_s / scene.dt)))
    steps = config.replan_steps(scene)
    state = scene.ego.trajectory.data[0].copy()
    executed = [state.copy()]
    records, emergencies = [], 0
    for step in steps:
        ctx = PlanningContext(scene, step, planner, models, ego_state=state)
        res = ctx.evaluate(mode, step_rng(config.seed, scene.id, step, mode, "closed"))
        emergencies += int(res.emergency)
        records.append(EvalRecord(scene.id, step, str(mode), "closed", res.chosen_cost,
                                  context_hindsight(ctx, res.index), critical, res.index, res.emergency,
                                  res.occluded_samples_used, candidates_digest(ctx.candidates)))
        chosen = res.candidate_states[res.index]
        executed.extend(chosen[1:stride + 1].copy())
        state = chosen[stride].copy()
    return ClosedLoopResult(str(mode), np.array(executed), records, emergencies)


def evaluate_scenes(scenes: Iterable[Scene], models: Optional[PlannerModels] = None,
                    planner: PlannerConfig = PlannerConfig(), config: ReplayConfig = ReplayConfig(),
                    loops: Sequence[str] = ("open",), progress: bool = False) -> list[EvalRecord]:
    """Records for every scene, loop and mode in deterministic (loop, scene, step, mode) order."""
    records = []
    for i, scene in enumerate(scenes):
        critical = None
        if "open" in loops:
            recs = run_open_loop(scene, config.modes, models, planner, config)
            critical = bool(recs and recs[0].critical)
            records += recs
        if "closed" in loops:
            if critical is None:
                critical = detect_critical(scene, config, planner)
            for mode in config.modes:
                records += run_closed_loop(scene, mode, models, planner, config, critical).records
        if progress:
            log.info("scene %d %s done", i, scene.id)
    return sorted(records, key=EvalRecord.sort_key)


# --- run-log and report --------------------------------------------------------------------------------


def dumps_records(records: Iterable[EvalRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), separators=(",", ":"), sort_keys=True) + "\n" for r in records)


def write_run_log(path, records: Iterable[EvalRecord]) -> Path:
    path = Path(path)
    path.write_text(dumps_records(records), encoding="utf-8")
    return path


def read_run_log(path) -> list[EvalRecord]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if line.strip():
            try:
                out.append(EvalRecord.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: bad record: {exc}") from exc
    return out


SUBSETS = ("all", "critical", "closed")


@dataclass(frozen=True)
class Report:
    rows: dict  # mode -> subset -> {"mean", "n", "delta_pct"}
    n_scenes: int
    n_critical_scenes: int

    def to_json(self) -> str:
        return json.dumps({"modes": self.rows, "n_scenes": self.n_scenes,
                           "n_critical_scenes": self.n_critical_scenes}, indent=2, sort_keys=True)

    def table(self) -> str:
        head = f"{'mode':<24}" + "".join(f"{s:>26}" for s in SUBSETS)
        lines = [head, "-" * len(head)]
        for mode, subsets in self.rows.items():
            cells = []
            for s in SUBSETS:
                r = subsets.get(s)
                if r is None:
                    cells.append(f"{'n/a':>26}")
                else:
                    d = "" if r["delta_pct"] is None else f" ({r['delta_pct']:+.2f}%)"
                    cells.append(f"{r['mean']:.4f}{d}".rjust(26))
            lines.append(f"{mode:<24}" + "".join(cells))
        lines.append(f"scenes: {self.n_scenes}  critical: {self.n_critical_scenes}")
        return "\n".join(lines) + "\n"


def aggregate_report(records: Sequence[EvalRecord]) -> Report:
    """Mean hindsight total per mode over all open-loop records, critical scenes, and closed loop,
    with the percentage difference from the Oracle."""
    if not records:
        raise ValueError("no records to aggregate")
    groups: dict = {}
    for r in records:
        subsets = ["closed"] if r.loop == "closed" else (["all", "critical"] if r.critical else ["all"])
        for s in subsets:
            groups.setdefault(r.mode, {}).setdefault(s, []).append(r.hindsight.total)
    modes = [m.value for m in ALL_MODES if m.value in groups] + sorted(set(groups) - {m.value for m in ALL_MODES})
    rows = {}
    oracle = groups.get(PlannerMode.ORACLE.value, {})
    for m in modes:
        rows[m] = {}
        for s, vals in groups[m].items():
            mean = float(np.mean(vals))
            base = oracle.get(s)
            delta = None
            if base is not None:
                bm = float(np.mean(base))
                delta = 0.0 if m == PlannerMode.ORACLE.value else (
                    (mean - bm) / abs(bm) * 100.0 if bm != 0 else None)
            rows[m][s] = {"mean": mean, "n": len(vals), "delta_pct": delta}
    scenes = {r.scene_id for r in records}
    crit = {r.scene_id for r in records if r.critical}
    return Report(rows, len(scenes), len(crit))


def paired_scene_gap(records: Sequence[EvalRecord], mode_a: str, mode_b: str, loop: str = "open",
                     critical_only: bool = True) -> tuple[float, float, int]:
    """Mean over scenes of (mean hindsight of b - mean hindsight of a) and its standard error."""
    per: dict = {}
    for r in records:
        if r.loop != loop or (critical_only and not r.critical) or r.mode not in (mode_a, mode_b):
            continue
        per.setdefault(r.scene_id, {}).setdefault(r.mode, []).append(r.hindsight.total)
    diffs = np.array([np.mean(v[mode_b]) - np.mean(v[mode_a]) for v in per.values()
                      if mode_a in v and mode_b in v])
    if len(diffs) == 0:
        return float("nan"), float("nan"), 0
    se = float(np.std(diffs, ddof=1) / np.sqrt(len(diffs))) if len(diffs) > 1 else float("nan")
    return float(np.mean(diffs)), se, len(diffs)
