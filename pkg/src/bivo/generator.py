"""Generative model of trajectories emerging from occluded space.

A Gaussian-latent CVAE over ego-frame future trajectories, conditioned on a
downsampled road raster and an occupancy grid (the fused map, the raw
observation, or nothing for the ablation).
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import nn
from .driver_sensor import DriverSensorModel, fused_ego_grid
from .nn import MlpSpec, Tensor
from .raster import (EGO_GRID, OCCLUDED, OccupancyGrid, OccludedSample, extract_occluded_samples,
                     frame_cells, observe, snapshot)
from .world import (DT, HEADING, HORIZON_STEPS, SPEED, X, Y, ControlLimits, RoadRaster, Scene,
                    Trajectory, feasibility_mask, wrap_angles)

log = logging.getLogger(__name__)

CONDITIONING = ("fused", "observed", "none")
N_CHANNELS = 4  # x, y, heading, speed
# decoder output = origin state + per-step increments, scaled to physical units
_ORIGIN_SCALE = np.array([10.0, 10.0, 1.0, 10.0])
_DELTA_SCALE = np.array([2.0, 2.0, 0.3, 1.0])
_INPUT_SCALE = np.array([10.0, 10.0, 1.0, 10.0])


@dataclass(frozen=True)
class GeneratorConfig:
    latent: int = 16
    hidden: int = 128
    horizon_steps: int = HORIZON_STEPS
    grid: int = EGO_GRID[0]
    downsample: int = 4
    conditioning: str = "fused"
    lr: float = 3e-4
    epochs: int = 5
    batch_size: int = 8
    seed: int = 0
    dt: float = DT

    def __post_init__(self):
        if self.conditioning not in CONDITIONING:
            raise ValueError(f"conditioning must be one of {CONDITIONING}")
        if self.grid % self.downsample:
            raise ValueError("grid size must be divisible by the downsample factor")

    @property
    def n_states(self) -> int:
        return self.horizon_steps + 1

    @property
    def traj_width(self) -> int:
        return self.n_states * N_CHANNELS

    @property
    def cond_width(self) -> int:
        return 2 * (self.grid // self.downsample) ** 2


@dataclass(frozen=True)
class WeightedTrajectory:
    trajectory: Trajectory
    weight: float


@dataclass(frozen=True)
class GenLossBreakdown:
    reconstruction_nll: float
    kl: float
    total: float
    position_mse: float


@dataclass(frozen=True)
class GeneratorDataset:
    trajectories: np.ndarray  # (N, n_states, 4) ego frame
    road: np.ndarray  # (N, g*g) downsampled drivable fraction
    fused: np.ndarray  # (N, g*g)
    observed: np.ndarray  # (N, g*g)
    scene_ids: tuple = ()

    def __len__(self) -> int:
        return len(self.trajectories)

    def conditions(self, conditioning: str) -> np.ndarray:
        occ = {"fused": self.fused, "observed": self.observed,
               "none": np.zeros_like(self.fused)}[conditioning]
        return np.concatenate([self.road, occ], axis=1).astype(np.float64)

    def subset(self, idx) -> "GeneratorDataset":
        idx = np.asarray(idx)
        ids = tuple(self.scene_ids[i] for i in idx) if self.scene_ids else ()
        return GeneratorDataset(self.trajectories[idx], self.road[idx], self.fused[idx],
                                self.observed[idx], ids)

    @classmethod
    def concat(cls, parts: Sequence["GeneratorDataset"]) -> "GeneratorDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            return empty_dataset(GeneratorConfig())
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                     ("trajectories", "road", "fused", "observed")),
                   tuple(i for p in parts for i in p.scene_ids))


def empty_dataset(config: GeneratorConfig) -> GeneratorDataset:
    g = (config.grid // config.downsample) ** 2
    z = np.zeros((0, g), np.float32)
    return GeneratorDataset(np.zeros((0, config.n_states, N_CHANNELS)), z, z.copy(), z.copy(), ())


def downsample(values: np.ndarray, factor: int) -> np.ndarray:
    H, W = values.shape
    return values.reshape(H // factor, factor, W // factor, factor).mean(axis=(1, 3))


def _cumulative_matrix(n_states: int) -> np.ndarray:
    """Maps decoder output (origin + increments, normalised) to flattened states."""
    M = np.zeros((n_states * N_CHANNELS, n_states * N_CHANNELS))
    for k in range(n_states):
        for ch in range(N_CHANNELS):
            row = k * N_CHANNELS + ch
            M[row, ch] = _ORIGIN_SCALE[ch]
            for j in range(1, k + 1):
                M[row, j * N_CHANNELS + ch] = _DELTA_SCALE[ch]
    return M


class OcclusionGenModel:
    """``offset`` is a fixed mean trajectory (flattened states) that the decoder
    predicts residuals around; it is set from the training data, not learned."""

    def __init__(self, config: GeneratorConfig, params: Optional[dict] = None,
                 offset: Optional[np.ndarray] = None):
        self.config = config
        self.offset = np.zeros(config.traj_width) if offset is None else np.asarray(offset, float).ravel()
        Hd, dz, T, C = config.hidden, config.latent, config.traj_width, config.cond_width
        self.specs = {
            "enc": MlpSpec.uniform((T + C, Hd, Hd, Hd, 2 * dz)),
            "prior": MlpSpec.uniform((C, Hd, Hd, Hd, 2 * dz)),
            "dec": MlpSpec.uniform((dz + C, Hd, Hd, Hd, T)),
        }
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = {}
            for name, spec in self.specs.items():
                params.update(nn.init_mlp(spec, rng, name, out_scale=0.1))
        self.params = params
        self._out_map = _cumulative_matrix(config.n_states).T

    def normalise(self, trajs: np.ndarray) -> np.ndarray:
        trajs = np.asarray(trajs, float)
        centred = trajs - self.offset.reshape(self.config.n_states, N_CHANNELS)
        return (centred / _INPUT_SCALE).reshape(len(trajs), -1)

    def posterior(self, p, trajs_norm, cond):
        x = np.concatenate([trajs_norm, cond], axis=1)
        out = nn.mlp_forward(self.specs["enc"], p, x, "enc")
        dz = self.config.latent
        return out[:, :dz], out[:, dz:]

    def prior(self, p, cond):
        out = nn.mlp_forward(self.specs["prior"], p, np.asarray(cond, float), "prior")
        dz = self.config.latent
        return out[:, :dz], out[:, dz:]

    def decode(self, p, z, cond):
        """Flattened physical states (B, n_states * 4)."""
        if isinstance(z, Tensor):
            raw = nn.mlp_forward(self.specs["dec"], p, nn.concat([z, Tensor(cond)]), "dec")
            return raw @ self._out_map + self.offset
        raw = nn.mlp_forward(self.specs["dec"], p, np.concatenate([z, cond], axis=1), "dec")
        return raw @ self._out_map + self.offset

    def decode_shared(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        """Decode many latents against one condition vector without repeating it K times."""
        p, spec = self.params, self.specs["dec"]
        dz = self.config.latent
        w0 = p["dec.0.w"]
        h = z @ w0[:dz] + (cond @ w0[dz:] + p["dec.0.b"])
        h = np.tanh(h) if spec.activations[0] == "tanh" else np.maximum(h, 0.0)
        for i, act in enumerate(spec.activations[1:], start=1):
            h = h @ p[f"dec.{i}.w"] + p[f"dec.{i}.b"]
            if act == "tanh":
                h = np.tanh(h)
            elif act == "relu":
                h = np.maximum(h, 0.0)
        return h @ self._out_map + self.offset


# --- loss -----------------------------------------------------------------------


def _elbo_graph(model: OcclusionGenModel, p, trajs, cond, rng):
    p = {k: nn.as_tensor(v) for k, v in p.items()}
    trajs = np.asarray(trajs, float)
    B = len(trajs)
    q_mu, q_lv = model.posterior(p, model.normalise(trajs), cond)
    p_mu, p_lv = model.prior(p, cond)
    z = nn.gaussian_reparam(q_mu, q_lv, rng)
    pred = model.decode(p, z, cond).reshape(B, model.config.n_states, N_CHANNELS)
    target = trajs
    pos = pred[:, :, 0:2] - target[:, :, 0:2]
    head = (pred[:, :, 2:3] - target[:, :, 2:3]).wrap_angle()
    speed = pred[:, :, 3:4] - target[:, :, 3:4]
    sse = pos.square().sum() + head.square().sum() + speed.square().sum()
    recon = 0.5 * sse / B
    kl = nn.kl_gaussian(q_mu, q_lv, p_mu, p_lv).sum() / B
    total = recon + kl
    pos_mse = float(np.mean(np.sum(pos.data ** 2, axis=-1)))
    return total, recon, kl, pos_mse


def gen_elbo_loss(model: OcclusionGenModel, trajs: np.ndarray, cond: np.ndarray,
                  rng: np.random.Generator, params: Optional[dict] = None) -> GenLossBreakdown:
    """Negative ELBO: unit-variance Gaussian NLL of the states plus KL(q || p) to the learned prior."""
    if len(trajs) == 0:
        raise ValueError("empty batch")
    total, recon, kl, mse = _elbo_graph(model, params if params is not None else model.params,
                                        trajs, cond, rng)
    return GenLossBreakdown(float(recon.data), float(kl.data), float(total.data), mse)


def gen_elbo_and_grad(model: OcclusionGenModel, trajs, cond, rng):
    def fn(leaves):
        total, recon, kl, mse = _elbo_graph(model, leaves, trajs, cond, rng)
        return total, (recon, kl, mse)
    total, (recon, kl, mse), grads = nn.value_and_grad(fn, model.params)
    return GenLossBreakdown(float(recon.data), float(kl.data), total, mse), grads


# --- training ---------------------------------------------------------------------------


@dataclass
class GenTrainState:
    model: OcclusionGenModel
    adam: nn.AdamState
    history: list = field(default_factory=list)  # per optimisation step
    epochs: list = field(default_factory=list)  # per epoch: train / test ELBO
    epoch: int = 0


def evaluate_elbo(model: OcclusionGenModel, dataset: GeneratorDataset, seed: int = 12345,
                  batch: int = 256) -> float:
    cond = dataset.conditions(model.config.conditioning)
    rng = np.random.default_rng(seed)
    totals = []
    for lo in range(0, len(dataset), batch):
        br = gen_elbo_loss(model, dataset.trajectories[lo:lo + batch], cond[lo:lo + batch], rng)
        totals.append(br.total * len(dataset.trajectories[lo:lo + batch]))
    return float(np.sum(totals) / len(dataset))


def train_generator(dataset: GeneratorDataset, config: GeneratorConfig = GeneratorConfig(),
                    test: Optional[GeneratorDataset] = None, resume: Optional[GenTrainState] = None,
                    max_epochs: Optional[int] = None) -> GenTrainState:
    """Adam over shuffled mini-batches for ``config.epochs`` epochs."""
    if len(dataset) == 0:
        raise ValueError("empty generator dataset")
    if resume is None:
        model = OcclusionGenModel(config, offset=dataset.trajectories.mean(axis=0))
        state = GenTrainState(model, nn.AdamState.for_params(model.params, lr=config.lr))
    else:
        state, model, config = resume, resume.model, resume.model.config
    cond = dataset.conditions(config.conditioning)
    n = len(dataset)
    last = config.epochs if max_epochs is None else min(config.epochs, state.epoch + max_epochs)
    while state.epoch < last:
        rng = np.random.default_rng([config.seed, state.epoch])
        order = rng.permutation(n)
        totals = []
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            br, grads = gen_elbo_and_grad(model, dataset.trajectories[idx], cond[idx], rng)
            nn.adam_step(state.adam, model.params, grads)
            totals.append(br.total)
            state.history.append({"step": state.adam.step - 1, "epoch": state.epoch, "total": br.total,
                                  "reconstruction_nll": br.reconstruction_nll, "kl": br.kl})
        record = {"epoch": state.epoch, "train_elbo": float(np.mean(totals))}
        if test is not None and len(test):
            record["test_elbo"] = evaluate_elbo(model, test)
        state.epochs.append(record)
        log.info("generator[%s] epoch %d %s", config.conditioning, state.epoch, record)
        state.epoch += 1
    return state


# --- sampling -------------------------------------------------------------------------


def condition_vector(road: RoadRaster | np.ndarray, grid: Optional[OccupancyGrid | np.ndarray],
                     config: GeneratorConfig) -> np.ndarray:
    road_cells = road.cells if isinstance(road, RoadRaster) else np.asarray(road)
    r = downsample(road_cells.astype(float), config.downsample).ravel()
    if config.conditioning == "none" or grid is None:
        occ = np.zeros_like(r)
    else:
        values = grid.values if isinstance(grid, OccupancyGrid) else np.asarray(grid, float)
        occ = downsample(values, config.downsample).ravel()
    return np.concatenate([r, occ])


def _finish_states(flat: np.ndarray, config: GeneratorConfig) -> np.ndarray:
    """(K, n*4) decoder output -> (K, n, 5) states with accel from speed differences."""
    K = len(flat)
    s4 = flat.reshape(K, config.n_states, N_CHANNELS)
    out = np.empty((K, config.n_states, 5))
    out[:, :, :2] = s4[:, :, :2]
    out[:, :, HEADING] = np.mod(s4[:, :, 2] + np.pi, 2 * np.pi) - np.pi
    out[:, :, SPEED] = np.maximum(s4[:, :, 3], 0.0)
    acc = np.diff(out[:, :, SPEED], axis=1) / config.dt
    out[:, :-1, 4] = acc
    out[:, -1, 4] = acc[:, -1] if acc.shape[1] else 0.0
    return out


def sample_states(model: OcclusionGenModel, cond: np.ndarray, K: int, rng: np.random.Generator,
                  standard_normal: bool = False) -> np.ndarray:
    dz = model.config.latent
    eps = rng.standard_normal((K, dz))
    if standard_normal:
        z = eps
    else:
        mu, lv = model.prior(model.params, cond[None])
        z = mu + np.exp(0.5 * np.clip(lv, nn.LOG_VAR_MIN, nn.LOG_VAR_MAX)) * eps
    return _finish_states(model.decode_shared(z, cond), model.config)


def filter_samples(states: np.ndarray, observed: OccupancyGrid, limits: ControlLimits, dt: float) -> np.ndarray:
    """Keep samples that start in an occluded cell of the observed grid and are feasible."""
    if len(states) == 0:
        return np.zeros(0, bool)
    H, W = observed.shape
    r, c, inside = frame_cells(states[:, 0, :2], H, W, observed.resolution)
    origin_ok = inside & (observed.values[r, c] == OCCLUDED)
    keep = origin_ok.copy()
    if keep.any():
        keep[keep] = feasibility_mask(states[keep], dt, limits)
    return keep


def sample_trajectory_arrays(model: OcclusionGenModel, road: RoadRaster, cond_grid: Optional[OccupancyGrid],
                             observed: OccupancyGrid, K: int, pi_e: float, limits: ControlLimits,
                             rng: np.random.Generator, standard_normal: bool = False):
    """Ego-frame survivors (n, n_states, 5) and their common weight pi_e / K."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0.0 <= pi_e <= 1.0:
        raise ValueError("pi_e must lie in [0, 1]")
    if not np.any(observed.values == OCCLUDED):
        return np.zeros((0, model.config.n_states, 5)), pi_e / K
    cond = condition_vector(road, cond_grid, model.config)
    states = sample_states(model, cond, K, rng, standard_normal)
    keep = filter_samples(states, observed, limits, model.config.dt)
    return states[keep], pi_e / K


def sample_trajectories(model: OcclusionGenModel, road: RoadRaster, cond_grid: Optional[OccupancyGrid],
                        observed: OccupancyGrid, K: int, pi_e: float, limits: ControlLimits,
                        rng: np.random.Generator, standard_normal: bool = False,
                        start_step: int = 0) -> list[WeightedTrajectory]:
    states, w = sample_trajectory_arrays(model, road, cond_grid, observed, K, pi_e, limits, rng,
                                         standard_normal)
    return [WeightedTrajectory(Trajectory(f"occluded_{i}", start_step, model.config.dt, s), w)
            for i, s in enumerate(states)]


# --- data mining ---------------------------------------------------------------------------


def samples_to_dataset(samples: Sequence[OccludedSample], config: GeneratorConfig) -> GeneratorDataset:
    if not samples:
        return empty_dataset(config)
    f = config.downsample
    trajs = np.stack([s.trajectory.data[:, [X, Y, HEADING, SPEED]] for s in samples])
    road = np.stack([downsample(s.road_raster.cells.astype(float), f).ravel() for s in samples])
    obs = np.stack([downsample(s.observed_grid.values, f).ravel() for s in samples])
    fused = np.stack([downsample((s.fused_grid or s.observed_grid).values, f).ravel() for s in samples])
    return GeneratorDataset(trajs, road.astype(np.float32), fused.astype(np.float32),
                            obs.astype(np.float32), tuple(s.scene_id for s in samples))


def mine_generator_data(scenes: Iterable[Scene], ds_model: Optional[DriverSensorModel],
                        config: GeneratorConfig = GeneratorConfig()) -> GeneratorDataset:
    """Occluded samples from every scene, with the fused grid attached when a DriverSensor is given."""
    parts = []
    for scene in scenes:
        samples = extract_occluded_samples(scene, config.grid, config.grid, config.horizon_steps)
        if not samples:
            continue
        if ds_model is not None:
            by_step = defaultdict(list)
            for s in samples:
                by_step[s.step].append(s)
            attached = []
            for t, group in sorted(by_step.items()):
                view = observe(snapshot(scene, t), scene.ego.id, group[0].observed_grid.center_pose,
                               config.grid, config.grid)
                fused = fused_ego_grid(ds_model, scene, t, view)
                attached += [OccludedSample(s.trajectory, s.road_raster, s.observed_grid, fused, s.step,
                                            s.scene_id) for s in group]
            samples = attached
        parts.append(samples_to_dataset(samples, config))
    return GeneratorDataset.concat(parts)


# --- persistence ----------------------------------------------------------------------------


def save_generator(path, state: GenTrainState):
    arrays = dict(state.model.params)
    arrays["buffer.offset"] = state.model.offset
    arrays.update({f"adam.m.{k}": v for k, v in state.adam.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.adam.v.items()})
    desc = {"kind": "generator", "config": asdict(state.model.config), "adam_step": state.adam.step,
            "epoch": state.epoch, "epochs": state.epochs,
            "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1, "beta2": state.adam.beta2,
                     "eps": state.adam.eps},
            "specs": {k: s.to_dict() for k, s in state.model.specs.items()}}
    return nn.save_checkpoint(path, desc, arrays)


def load_generator(path) -> GenTrainState:
    desc, arrays = nn.load_checkpoint(path)
    if desc.get("kind") != "generator":
        raise nn.CheckpointError(f"{path}: not a generator checkpoint")
    config = GeneratorConfig(**desc["config"])
    params = {k: v for k, v in arrays.items() if not k.startswith(("adam.", "buffer."))}
    adam = nn.AdamState(step=desc["adam_step"], **desc["adam"],
                        m={k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")},
                        v={k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")})
    return GenTrainState(OcclusionGenModel(config, params, arrays.get("buffer.offset")), adam, epochs=desc["epochs"], epoch=desc["epoch"])
