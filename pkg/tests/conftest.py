from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import pytest

from bivo import driver_sensor as dsm
from bivo import generator as gen
from bivo import scenarios
from bivo.cli import split_by_scene
from bivo.config import RunConfig
from bivo.planner import PlannerModels
from bivo.world import DT, Agent, Scene, Trajectory


def agent(id_, states, kind="vehicle", length=4.5, width=1.9, start=0) -> Agent:
    return Agent(id_, kind, length, width, Trajectory(id_, start, DT, np.asarray(states, float)))


def parked(x, y, n, heading=0.0):
    return np.tile([x, y, heading, 0.0, 0.0], (n, 1))


def make_scene(agents, ego_states, sid="test", duration=None) -> Scene:
    lanes, polys = scenarios.two_lane_road()
    ego_states = np.asarray(ego_states, float)
    return Scene(sid, lanes, polys, tuple(agents), agent("ego", ego_states), duration or len(ego_states))


def fig1_scene(n=12) -> Scene:
    """Ego driving east, a parked truck to its front right and a stopped cyclist behind the truck."""
    ego = scenarios.constant_velocity(0.0, 0.0, 0.0, 0.0, n)
    truck = agent("truck", parked(10.0, -3.0, n), length=8.0, width=3.0)
    cyclist = agent("cyclist", parked(17.0, -5.0, n, math.pi / 2), kind="cyclist", length=1.8, width=0.6)
    return make_scene([truck, cyclist], ego, "fig1")


@pytest.fixture
def fig1():
    return fig1_scene()


@pytest.fixture(scope="session")
def tiny_models():
    """Briefly trained models on a handful of occlusion scenes; cheap, for plumbing tests only."""
    scenes = scenarios.generate_batch(9, seed=3, occluded_fraction=1.0)
    ds_cfg = dsm.DriverSensorConfig(n_classes=8, hidden=32, train_steps=40, batch_size=16)
    ds_state = dsm.train_driver_sensor(dsm.mine_driver_sensor_data(scenes, ds_cfg, step_stride=4), ds_cfg)
    gcfg = gen.GeneratorConfig(latent=4, hidden=32, epochs=1, batch_size=16)
    data = gen.mine_generator_data(scenes, ds_state.model, gcfg)
    g = gen.train_generator(data, gcfg).model
    go = gen.train_generator(data, gen.GeneratorConfig(latent=4, hidden=32, epochs=1, batch_size=16,
                                                       conditioning="observed")).model
    return PlannerModels(ds_state.model, g, go), scenes, data


@dataclass
class Pipeline:
    """Models trained at the default run configuration, plus the data they were trained on."""
    cfg: RunConfig
    train_scenes: list
    ds_state: dsm.TrainState
    data: gen.GeneratorDataset
    train: gen.GeneratorDataset
    test: gen.GeneratorDataset
    fused: gen.GenTrainState
    observed: gen.GenTrainState
    train_seconds: float

    @property
    def models(self) -> PlannerModels:
        return PlannerModels(self.ds_state.model, self.fused.model, self.observed.model)


@pytest.fixture(scope="session")
def trained_pipeline() -> Pipeline:
    t0 = time.perf_counter()
    cfg = RunConfig()
    scenes = scenarios.generate_batch(290, seed=0, occluded_fraction=0.75)
    ds_state = dsm.train_driver_sensor(dsm.mine_driver_sensor_data(scenes, cfg.ds_config()), cfg.ds_config())
    data = gen.mine_generator_data(scenes, ds_state.model, cfg.gen_config())
    train, test = split_by_scene(data, cfg.gen_test_fraction, cfg.seed)
    fused = gen.train_generator(train, cfg.gen_config("fused"), test)
    observed = gen.train_generator(train, cfg.gen_config("observed"), test)
    return Pipeline(cfg, scenes, ds_state, data, train, test, fused, observed, time.perf_counter() - t0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
