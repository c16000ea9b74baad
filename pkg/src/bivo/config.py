"""Run configuration: defaults, ``key = value`` files, and command-line overrides."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

from .driver_sensor import DriverSensorConfig
from .generator import GeneratorConfig
from .harness import ReplayConfig
from .planner import ALL_MODES, CostWeights, PlannerConfig, PlannerMode
from .world import ControlLimits

ENV_VAR = "BIVO_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workdir: str = "bivo_run"
    scenes_dir: str = "scenes"
    checkpoints_dir: str = "checkpoints"
    logs_dir: str = "logs"
    reports_dir: str = "reports"
    # data
    train_scenes: int = 240
    train_occluded_fraction: float = 0.75
    eval_scenes: int = 100
    eval_occluded_fraction: float = 0.1
    # driver sensor
    ds_classes: int = 32
    ds_hidden: int = 128
    ds_history_steps: int = 4
    agent_grid: int = 30
    ds_steps: int = 3000
    ds_batch: int = 64
    # generator
    gen_latent: int = 16
    gen_hidden: int = 128
    gen_epochs: int = 20
    gen_batch: int = 8
    gen_test_fraction: float = 0.2
    lr: float = 3e-4
    ego_grid: int = 120
    # planner
    candidates: int = 64
    samples: int = 1000
    pi_e: float = 0.1
    rbf_sigma: float = 2.0
    w_hd: float = 1.0
    w_vd: float = 1.0
    w_ef: float = 0.1
    w_col: float = 10.0
    w_goal: float = 1.0
    max_accel: float = 4.0
    min_accel: float = -8.0
    max_speed: float = 20.0
    max_curvature: float = 0.3
    standard_normal: bool = False
    # replay
    horizon_s: float = 5.0
    replan_period_s: float = 0.5
    max_scene_s: float = 15.0
    modes: str = ",".join(m.value for m in ALL_MODES)
    # bench
    bench_repeats: int = 30

    def __post_init__(self):
        try:
            self.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self):
        positive = ("train_scenes", "eval_scenes", "ds_classes", "ds_hidden", "ds_history_steps", "agent_grid",
                    "ds_steps", "ds_batch", "gen_latent", "gen_hidden", "gen_epochs", "gen_batch", "ego_grid",
                    "candidates", "samples", "bench_repeats")
        for k in positive:
            if getattr(self, k) < 1:
                raise ConfigError(f"{k} must be >= 1")
        for k in ("train_occluded_fraction", "eval_occluded_fraction", "pi_e"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ConfigError(f"{k} must lie in [0, 1]")
        if not 0.0 < self.gen_test_fraction < 1.0:
            raise ConfigError("gen_test_fraction must lie in (0, 1)")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.ego_grid % 4:
            raise ConfigError("ego_grid must be divisible by 4")
        self.planner()
        self.replay()
        self.ds_config()
        self.gen_config()

    # -- derived configs --------------------------------------------------------------------

    def limits(self) -> ControlLimits:
        return ControlLimits(self.max_accel, self.min_accel, self.max_speed, self.max_curvature)

    def planner(self) -> PlannerConfig:
        return PlannerConfig(n_candidates=self.candidates, n_samples=self.samples, pi_e=self.pi_e,
                             weights=CostWeights(self.w_hd, self.w_vd, self.w_ef, self.w_col, self.w_goal,
                                                 self.rbf_sigma),
                             limits=self.limits(), grid=self.ego_grid, standard_normal=self.standard_normal)

    def replay(self) -> ReplayConfig:
        return ReplayConfig(self.horizon_s, self.replan_period_s, self.max_scene_s, self.mode_list(), self.seed)

    def mode_list(self) -> tuple:
        try:
            return tuple(PlannerMode(m.strip()) for m in self.modes.split(",") if m.strip())
        except ValueError as exc:
            raise ConfigError(f"unknown mode in {self.modes!r}") from exc

    def ds_config(self) -> DriverSensorConfig:
        return DriverSensorConfig(n_classes=self.ds_classes, hidden=self.ds_hidden,
                                  history_steps=self.ds_history_steps, grid=self.agent_grid, lr=self.lr,
                                  batch_size=self.ds_batch, train_steps=self.ds_steps, seed=self.seed)

    def gen_config(self, conditioning: str = "fused") -> GeneratorConfig:
        return GeneratorConfig(latent=self.gen_latent, hidden=self.gen_hidden, grid=self.ego_grid,
                               conditioning=conditioning, lr=self.lr, epochs=self.gen_epochs,
                               batch_size=self.gen_batch, seed=self.seed)

    # -- paths ------------------------------------------------------------------------------

    def path(self, key: str) -> Path:
        sub = getattr(self, f"{key}_dir")
        p = Path(sub)
        return p if p.is_absolute() else Path(self.workdir) / p

    # -- text round trip ------------------------------------------------------------------------

    def dumps(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _TYPES[key]
    raw = raw.strip()
    try:
        if t in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if t in ("int", int):
            return int(raw)
        if t in ("float", float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_pairs(lines: Sequence[str], source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def loads(text: str) -> RunConfig:
    return RunConfig(**parse_pairs(text.splitlines()))


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the file (explicit path or $BIVO_CONFIG), then ``key=value`` overrides."""
    values = {}
    path = path or os.environ.get(ENV_VAR)
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_pairs(p.read_text().splitlines(), str(p)))
    values.update(parse_pairs(list(overrides), "--set"))
    return RunConfig(**values)


def replace_config(cfg: RunConfig, **kw) -> RunConfig:
    return dataclasses.replace(cfg, **kw)
