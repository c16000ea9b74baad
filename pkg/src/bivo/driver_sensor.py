"""Per-agent occupancy reconstruction from motion history, and evidential fusion.

Each visible agent's recent trajectory is encoded by a small CVAE with a
categorical latent; decoding the most likely class gives a probability map
of the agent's surroundings. Maps from all agents are combined with the
ego's own observation using Dempster's rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nn
from .nn import MlpSpec, Tensor
from .raster import (AGENT_GRID, EGO_GRID, OCCLUDED, OccupancyGrid, View, cell_centers,
                     frame_cells, observe, rasterize_footprints, snapshot)
from .world import HEADING, SPEED, ACCEL, X, Y, Scene, frame_to_world, world_to_frame, wrap_angles

log = logging.getLogger(__name__)

DISCOUNT = 0.2
N_FEATURES = 5


@dataclass(frozen=True)
class DriverSensorConfig:
    n_classes: int = 32
    hidden: int = 128
    history_steps: int = 4
    grid: int = AGENT_GRID[0]
    lr: float = 3e-4
    batch_size: int = 64
    train_steps: int = 3000
    beta_anneal_frac: float = 0.5
    temp_start: float = 1.0
    temp_end: float = 0.3
    seed: int = 0

    @property
    def input_width(self) -> int:
        return (self.history_steps + 1) * N_FEATURES


@dataclass(frozen=True)
class DsLossBreakdown:
    reconstruction_nll: float
    kl: float
    mutual_information: float
    batch_entropy: float
    beta: float
    total: float


@dataclass(frozen=True)
class DriverSensorDataset:
    histories: np.ndarray  # (N, input_width)
    grids: np.ndarray  # (N, grid * grid), values in {0, 1}

    def __len__(self) -> int:
        return len(self.histories)


class DriverSensorModel:
    def __init__(self, config: DriverSensorConfig, params: Optional[dict] = None):
        self.config = config
        C, Hd, G = config.n_classes, config.hidden, config.grid * config.grid
        self.specs = {
            "enc": MlpSpec.uniform((config.input_width, Hd, Hd), output="tanh"),
            "prior": MlpSpec.uniform((Hd, C)),
            "post": MlpSpec.uniform((Hd + G, Hd, C)),
            "dec": MlpSpec.uniform((C, Hd, G)),
        }
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = {}
            for name, spec in self.specs.items():
                params.update(nn.init_mlp(spec, rng, name, out_scale=0.1 if name != "enc" else 1.0))
        self.params = params

    def forward(self, p, histories, grids=None):
        """Prior logits, and posterior logits when ground-truth grids are given."""
        h = nn.mlp_forward(self.specs["enc"], p, histories, "enc")
        prior = nn.mlp_forward(self.specs["prior"], p, h, "prior")
        if grids is None:
            return prior, None
        post_in = nn.concat([h, grids]) if isinstance(h, Tensor) else np.concatenate([h, grids], axis=-1)
        return prior, nn.mlp_forward(self.specs["post"], p, post_in, "post")

    def decode(self, p, z):
        return nn.mlp_forward(self.specs["dec"], p, z, "dec")


# --- features -------------------------------------------------------------------


def history_features(window: np.ndarray) -> np.ndarray:
    """(T+1, 5) world-frame history -> flat features in the agent's current frame."""
    window = np.asarray(window, float)
    pose = window[-1, [X, Y, HEADING]]
    xy = world_to_frame(window[:, :2], pose)
    feats = np.stack([xy[:, 0] / 10.0, xy[:, 1] / 10.0, wrap_angles(window[:, HEADING] - pose[2]),
                      window[:, SPEED] / 10.0, window[:, ACCEL] / 4.0], axis=-1)
    return feats.ravel()


def _temperature(config: DriverSensorConfig, step: int, total: int) -> float:
    frac = min(step / max(total - 1, 1), 1.0)
    return config.temp_start + (config.temp_end - config.temp_start) * frac


def _beta(config: DriverSensorConfig, step: int, total: int) -> float:
    ramp = config.beta_anneal_frac * total
    return 1.0 if ramp <= 0 else min(step / ramp, 1.0)


# --- loss -------------------------------------------------------------------------


def _ds_loss_graph(model: DriverSensorModel, p, histories, grids, beta, rng, temperature):
    prior_logits, post_logits = model.forward(p, Tensor(histories), Tensor(grids))
    B = histories.shape[0]
    z = nn.gumbel_softmax_sample(post_logits, temperature, rng)
    # mean over cells keeps the reconstruction on the same scale as the latent terms
    recon = nn.bce_with_logits(model.decode(p, z), grids).sum() / (B * grids.shape[1])
    kl = nn.kl_categorical_logits(post_logits, prior_logits).sum() / B
    q = nn.softmax(post_logits)
    q_bar = q.mean(axis=0)
    h_bar = -(q_bar * q_bar.log()).sum()
    h_items = -(q * nn.log_softmax(post_logits)).sum() / B
    mi = h_bar - h_items
    batch_entropy = -h_bar
    total = recon + beta * kl - mi + (1.0 - beta) * batch_entropy
    parts = (recon, kl, mi, batch_entropy)
    return total, parts, q_bar.data


def ds_loss(model: DriverSensorModel, histories: np.ndarray, grids: np.ndarray, beta: float,
            rng: np.random.Generator, temperature: float = 1.0, params: Optional[dict] = None):
    """Loss breakdown on one batch.

    ``batch_entropy`` is stored as the negative entropy of the batch-mean
    posterior so that adding it with weight (1 - beta) rewards spreading mass
    over many latent classes early in training.
    """
    histories = np.asarray(histories, float)
    grids = np.asarray(grids, float)
    if histories.shape[0] < 2:
        raise ValueError("ds_loss needs a batch of at least 2")
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    p = params if params is not None else model.params
    total, parts, _ = _ds_loss_graph(model, p, histories, grids, beta, rng, temperature)
    recon, kl, mi, ent = (float(t.data) for t in parts)
    return DsLossBreakdown(recon, kl, mi, ent, float(beta), float(total.data))


def ds_loss_and_grad(model, histories, grids, beta, rng, temperature):
    def fn(leaves):
        total, parts, q_bar = _ds_loss_graph(model, leaves, histories, grids, beta, rng, temperature)
        return total, (parts, q_bar)
    total, (parts, q_bar), grads = nn.value_and_grad(fn, model.params)
    recon, kl, mi, ent = (float(t.data) for t in parts)
    return DsLossBreakdown(recon, kl, mi, ent, float(beta), total), q_bar, grads


# --- training ---------------------------------------------------------------------


@dataclass
class TrainState:
    model: DriverSensorModel
    adam: nn.AdamState
    history: list = field(default_factory=list)


def active_classes(q_bar: np.ndarray) -> int:
    return int(np.sum(q_bar > 1.0 / (10 * len(q_bar))))


def train_driver_sensor(dataset: DriverSensorDataset, config: DriverSensorConfig = DriverSensorConfig(),
                        resume: Optional[TrainState] = None, max_steps: Optional[int] = None) -> TrainState:
    """Adam on the loss with beta ramped 0 -> 1 over the first half and the Gumbel
    temperature annealed linearly; ``max_steps`` stops early (for resumable runs)."""
    if len(dataset) == 0:
        raise ValueError("empty DriverSensor dataset")
    if resume is None:
        model = DriverSensorModel(config)
        state = TrainState(model, nn.AdamState.for_params(model.params, lr=config.lr))
    else:
        state = resume
        model = state.model
        config = model.config
    total_steps = config.train_steps
    n = len(dataset)
    bs = min(config.batch_size, n)
    if bs < 2:
        raise ValueError("DriverSensor training needs at least 2 samples")
    end = total_steps if max_steps is None else min(total_steps, state.adam.step + max_steps)
    while state.adam.step < end:
        step = state.adam.step
        rng = np.random.default_rng([config.seed, step])
        idx = rng.choice(n, bs, replace=False)
        beta = _beta(config, step, total_steps)
        temp = _temperature(config, step, total_steps)
        br, q_bar, grads = ds_loss_and_grad(model, dataset.histories[idx], dataset.grids[idx], beta, rng, temp)
        nn.adam_step(state.adam, model.params, grads)
        state.history.append({"step": step, "total": br.total, "reconstruction_nll": br.reconstruction_nll,
                              "kl": br.kl, "mutual_information": br.mutual_information,
                              "batch_entropy": br.batch_entropy, "beta": beta, "temperature": temp,
                              "active_classes": active_classes(q_bar)})
        if step % 500 == 0:
            log.info("driver-sensor step %d total %.2f active %d", step, br.total, active_classes(q_bar))
    return state


# --- inference --------------------------------------------------------------------


def reconstruct_batch(model: DriverSensorModel, histories: np.ndarray) -> np.ndarray:
    """Decode the argmax prior class for each history; returns (N, G, G) probabilities."""
    histories = np.atleast_2d(np.asarray(histories, float))
    prior, _ = model.forward(model.params, histories)
    z = np.eye(model.config.n_classes)[np.argmax(prior, axis=-1)]
    G = model.config.grid
    return nn.sigmoid(model.decode(model.params, z)).reshape(-1, G, G)


def reconstruct_most_likely(model: DriverSensorModel, history: np.ndarray) -> OccupancyGrid:
    """``history`` is the (T+1, 5) world-frame window; the grid is centred on its last state."""
    history = np.asarray(history, float)
    probs = reconstruct_batch(model, history_features(history)[None])[0]
    last = history[-1]
    return OccupancyGrid((last[X], last[Y], last[HEADING]), probs)


# --- belief functions ----------------------------------------------------------------


@dataclass(frozen=True)
class BeliefCell:
    mass_occupied: float
    mass_free: float
    mass_unknown: float
    conflict: bool = False

    def __post_init__(self):
        m = (self.mass_occupied, self.mass_free, self.mass_unknown)
        if min(m) < -1e-12 or abs(sum(m) - 1.0) > 1e-9:
            raise ValueError(f"invalid belief masses {m}")

    @property
    def pignistic(self) -> float:
        return self.mass_occupied + 0.5 * self.mass_unknown


VACUOUS = BeliefCell(0.0, 0.0, 1.0)


def to_belief(value: float, observed: bool, discount: float = DISCOUNT) -> BeliefCell:
    if not 0.0 <= value <= 1.0:
        raise ValueError("cell value must lie in [0, 1]")
    if not observed:
        return VACUOUS
    return BeliefCell(value * (1.0 - discount), (1.0 - value) * (1.0 - discount), discount)


def dempster_combine(a: BeliefCell, b: BeliefCell) -> BeliefCell:
    k = a.mass_occupied * b.mass_free + a.mass_free * b.mass_occupied
    if k >= 1.0 - 1e-15:
        return BeliefCell(0.0, 0.0, 1.0, conflict=True)
    occ = a.mass_occupied * (b.mass_occupied + b.mass_unknown) + a.mass_unknown * b.mass_occupied
    free = a.mass_free * (b.mass_free + b.mass_unknown) + a.mass_unknown * b.mass_free
    unk = a.mass_unknown * b.mass_unknown
    norm = 1.0 - k
    occ, free, unk = occ / norm, free / norm, unk / norm
    # renormalise away rounding so masses sum to one
    s = occ + free + unk
    return BeliefCell(occ / s, free / s, unk / s)


def belief_arrays(values: np.ndarray, observed: np.ndarray, discount: float = DISCOUNT):
    values = np.asarray(values, float)
    observed = np.asarray(observed, bool)
    occ = np.where(observed, values * (1.0 - discount), 0.0)
    free = np.where(observed, (1.0 - values) * (1.0 - discount), 0.0)
    unk = np.where(observed, discount, 1.0)
    return occ, free, unk


def combine_arrays(a, b):
    """Vectorised Dempster's rule; totally conflicting cells become vacuous."""
    ao, af, au = a
    bo, bf, bu = b
    k = ao * bf + af * bo
    conflict = k >= 1.0 - 1e-15
    norm = np.where(conflict, 1.0, 1.0 - k)
    occ = (ao * (bo + bu) + au * bo) / norm
    free = (af * (bf + bu) + au * bf) / norm
    unk = au * bu / norm
    occ = np.where(conflict, 0.0, occ)
    free = np.where(conflict, 0.0, free)
    unk = np.where(conflict, 1.0, unk)
    return occ, free, unk


def fuse_to_ego(ego_obs: OccupancyGrid, agent_grids: Sequence[OccupancyGrid],
                discount: float = DISCOUNT) -> OccupancyGrid:
    """Combine the ego observation with agent-centred probability maps.

    Every ego cell centre is looked up (nearest cell) in each source grid;
    the result is the pignistic probability occupied + unknown / 2.
    """
    vals = ego_obs.values
    H, W = vals.shape
    masses = belief_arrays(vals, vals != OCCLUDED, discount)
    if agent_grids:
        world = frame_to_world(cell_centers(H, W, ego_obs.resolution).reshape(-1, 2), ego_obs.center_pose)
        occ, free, unk = (m.ravel().copy() for m in masses)
        for src in agent_grids:
            local = world_to_frame(world, src.center_pose)
            r, c, inside = frame_cells(local, *src.shape, src.resolution)
            if not inside.any():
                continue
            sel = np.nonzero(inside)[0]
            p = src.values[r[sel], c[sel]]
            b = belief_arrays(p, np.ones_like(p, bool), discount)
            o, f, u = combine_arrays((occ[sel], free[sel], unk[sel]), b)
            occ[sel], free[sel], unk[sel] = o, f, u
        masses = (occ.reshape(H, W), free.reshape(H, W), unk.reshape(H, W))
    fused = np.clip(masses[0] + 0.5 * masses[2], 0.0, 1.0)
    return OccupancyGrid(ego_obs.center_pose, fused, ego_obs.resolution)


# --- scene-level helpers -------------------------------------------------------------


def agent_history(scene: Scene, agent_id: str, step: int, history_steps: int) -> Optional[np.ndarray]:
    agent = scene.agent_map.get(agent_id)
    if agent is None or not agent.trajectory.covers(step - history_steps, step):
        return None
    return agent.trajectory.window(step - history_steps, step)


def fused_ego_grid(model: DriverSensorModel, scene: Scene, step: int, view: View,
                   ego_id: Optional[str] = None) -> OccupancyGrid:
    """M_ego at ``step``: reconstructions of every visible agent with enough history, fused."""
    ego_id = ego_id or scene.ego.id
    hist, poses = [], []
    for agent_id in view.footprints:
        if agent_id == ego_id or not view.agent_visible(agent_id):
            continue
        window = agent_history(scene, agent_id, step, model.config.history_steps)
        if window is None:
            continue
        hist.append(history_features(window))
        poses.append(tuple(window[-1, [X, Y, HEADING]]))
    sources = []
    if hist:
        probs = reconstruct_batch(model, np.stack(hist))
        sources = [OccupancyGrid(pose, pr) for pose, pr in zip(poses, probs)]
    return fuse_to_ego(view.observed, sources)


def mine_driver_sensor_data(scenes: Iterable[Scene], config: DriverSensorConfig = DriverSensorConfig(),
                            step_stride: int = 2, ego_grid: tuple[int, int] = EGO_GRID) -> DriverSensorDataset:
    """(history, ground-truth surroundings) for every ego-visible agent with enough history."""
    G = config.grid
    hs, gs = [], []
    for scene in scenes:
        ego = scene.ego
        for t in range(config.history_steps, scene.duration_steps, step_stride):
            if not ego.trajectory.covers(t, t):
                continue
            fps = snapshot(scene, t)
            if len(fps) < 2:
                continue
            pose = tuple(ego.trajectory.data[t - ego.trajectory.start_step][[X, Y, HEADING]])
            view = observe(fps, ego.id, pose, *ego_grid)
            for fp in fps:
                if fp.id == ego.id or not view.agent_visible(fp.id):
                    continue
                window = agent_history(scene, fp.id, t, config.history_steps)
                if window is None:
                    continue
                apose = tuple(fp.state[[X, Y, HEADING]])
                truth, _ = rasterize_footprints(fps, apose, G, G, exclude_id=fp.id)
                hs.append(history_features(window))
                gs.append(truth.ravel().astype(float))
    if not hs:
        return DriverSensorDataset(np.zeros((0, config.input_width)), np.zeros((0, G * G)))
    return DriverSensorDataset(np.stack(hs), np.stack(gs))


# --- persistence -----------------------------------------------------------------------


def save_driver_sensor(path, state: TrainState):
    arrays = dict(state.model.params)
    arrays.update({f"adam.m.{k}": v for k, v in state.adam.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.adam.v.items()})
    desc = {"kind": "driver_sensor", "config": asdict(state.model.config), "adam_step": state.adam.step,
            "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                     "eps": state.adam.eps},
            "specs": {k: s.to_dict() for k, s in state.model.specs.items()}}
    return nn.save_checkpoint(path, desc, arrays)


def load_driver_sensor(path) -> TrainState:
    desc, arrays = nn.load_checkpoint(path)
    if desc.get("kind") != "driver_sensor":
        raise nn.CheckpointError(f"{path}: not a DriverSensor checkpoint")
    config = DriverSensorConfig(**desc["config"])
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    adam = nn.AdamState(step=desc["adam_step"], **desc["adam"],
                        m={k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")},
                        v={k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")})
    return TrainState(DriverSensorModel(config, params), adam)
