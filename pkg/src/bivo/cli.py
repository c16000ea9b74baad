"""Command-line entry point: gen-data, train, eval, render, bench."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import driver_sensor as dsm
from . import generator as gen
from . import harness, plotting, scenarios
from .config import ConfigError, RunConfig, load_config
from .nn import CheckpointError
from .planner import PlannerMode, PlannerModels, PlanningContext
from .raster import write_pgm

log = logging.getLogger("bivo")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ORDER = 0, 2, 3, 4
SPLITS = ("train", "eval")
DS_CKPT = "driver_sensor.ckpt"
GEN_CKPT = "generator.ckpt"
GEN_OBS_CKPT = "generator_observed.ckpt"


class DataError(RuntimeError):
    pass


class OrderingError(RuntimeError):
    pass


# --- data --------------------------------------------------------------------------------------------


def _split_params(cfg: RunConfig, split: str) -> tuple[int, float, int]:
    if split == "train":
        return cfg.train_scenes, cfg.train_occluded_fraction, cfg.seed * 2
    return cfg.eval_scenes, cfg.eval_occluded_fraction, cfg.seed * 2 + 1


def cmd_gen_data(cfg: RunConfig, splits: Sequence[str] = SPLITS, n: Optional[int] = None) -> dict:
    manifests = {}
    for split in splits:
        count, frac, seed = _split_params(cfg, split)
        count = n if n is not None else count
        out = cfg.path("scenes") / split
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise DataError(f"cannot write to {out}: {exc}") from exc
        for old in out.glob("*.json"):
            old.unlink()
        scenes = scenarios.generate_batch(count, seed, frac)
        files = []
        for s in scenes:
            scenarios.save_scene(out / f"{s.id}.json", s)
            files.append(f"{s.id}.json")
        manifest = {"split": split, "seed": seed, "count": len(files), "occluded_fraction": frac,
                    "by_template": dict(sorted(Counter(s.id.rsplit("_", 2)[0] for s in scenes).items())),
                    "files": files}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        manifests[split] = manifest
        log.info("wrote %d %s scenes to %s", len(files), split, out)
    return manifests


def load_split(cfg: RunConfig, split: str) -> list:
    d = cfg.path("scenes") / split
    mf = d / "manifest.json"
    if not mf.is_file():
        raise DataError(f"no scene manifest at {mf}; run gen-data first")
    try:
        manifest = json.loads(mf.read_text())
        return [scenarios.load_scene(d / f) for f in manifest["files"]]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"bad scene data in {d}: {exc}") from exc


# --- training --------------------------------------------------------------------------------------------


def _write_csv(path: Path, rows: Sequence[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _read_csv(path: Path) -> list[dict]:
    if not path.is_file():
        return []
    with path.open() as fh:
        return list(csv.DictReader(fh))


def cmd_train(cfg: RunConfig, stage: str, resume: bool = False, max_steps: Optional[int] = None) -> Path:
    ck = cfg.path("checkpoints")
    logs = cfg.path("logs")
    ck.mkdir(parents=True, exist_ok=True)
    if stage == "driversensor":
        return _train_ds(cfg, ck, logs, resume, max_steps)
    if stage == "generator":
        if not (ck / DS_CKPT).is_file():
            raise OrderingError("the generator stage needs a DriverSensor checkpoint; train driversensor first")
        return _train_gen(cfg, ck, logs, resume, max_steps)
    raise ConfigError(f"unknown stage {stage!r}")


def _train_ds(cfg, ck, logs, resume, max_steps):
    path = ck / DS_CKPT
    csv_path = logs / "driver_sensor_loss.csv"
    scenes = load_split(cfg, "train")
    data = dsm.mine_driver_sensor_data(scenes, cfg.ds_config())
    if len(data) < 2:
        raise DataError("not enough visible agents to train the DriverSensor")
    state = None
    previous = []
    if resume:
        if not path.is_file():
            raise OrderingError(f"nothing to resume: {path} does not exist")
        state = dsm.load_driver_sensor(path)
        previous = _read_csv(csv_path)[:state.adam.step]
    state = dsm.train_driver_sensor(data, cfg.ds_config(), resume=state, max_steps=max_steps)
    dsm.save_driver_sensor(path, state)
    _write_csv(csv_path, previous + state.history)
    rows = [{k: float(v) for k, v in r.items()} for r in previous] + state.history
    plotting.plot_curves(rows, ("reconstruction_nll", "kl", "mutual_information"),
                         cfg.path("reports") / "driver_sensor_loss.png", "DriverSensor training")
    log.info("DriverSensor at step %d -> %s", state.adam.step, path)
    return path


def split_by_scene(data: gen.GeneratorDataset, test_fraction: float, seed: int):
    ids = sorted(set(data.scene_ids))
    rng = np.random.default_rng([seed, 7])
    n_test = max(1, int(round(test_fraction * len(ids)))) if len(ids) > 1 else 0
    test_ids = set(rng.choice(ids, n_test, replace=False).tolist()) if n_test else set()
    test = [i for i, s in enumerate(data.scene_ids) if s in test_ids]
    train = [i for i, s in enumerate(data.scene_ids) if s not in test_ids]
    return data.subset(train), data.subset(test)


def _train_gen(cfg, ck, logs, resume, max_epochs):
    ds_model = dsm.load_driver_sensor(ck / DS_CKPT).model
    scenes = load_split(cfg, "train")
    data = gen.mine_generator_data(scenes, ds_model, cfg.gen_config())
    if len(data) == 0:
        raise DataError("no occluded trajectories found in the training scenes")
    train, test = split_by_scene(data, cfg.gen_test_fraction, cfg.seed)
    out = None
    for cond, name in (("fused", GEN_CKPT), ("observed", GEN_OBS_CKPT)):
        path = ck / name
        csv_path = logs / f"{path.stem}_loss.csv"
        state, previous = None, []
        if resume:
            if not path.is_file():
                raise OrderingError(f"nothing to resume: {path} does not exist")
            state = gen.load_generator(path)
            previous = _read_csv(csv_path)[:state.adam.step]
        state = gen.train_generator(train, cfg.gen_config(cond), test, resume=state, max_epochs=max_epochs)
        gen.save_generator(path, state)
        _write_csv(csv_path, previous + state.history)
        _write_csv(logs / f"{path.stem}_elbo.csv", state.epochs)
        log.info("generator[%s] epoch %d -> %s", cond, state.epoch, path)
        out = out or path
    return out


def load_models(cfg: RunConfig, modes: Sequence[PlannerMode]) -> PlannerModels:
    ck = cfg.path("checkpoints")
    need_ds = any(m in (PlannerMode.BIVO, PlannerMode.DRIVER_SENSOR_HEURISTIC) for m in modes)
    need = {DS_CKPT: need_ds, GEN_CKPT: PlannerMode.BIVO in modes, GEN_OBS_CKPT: PlannerMode.CVAE_ONLY in modes}
    for name, required in need.items():
        if required and not (ck / name).is_file():
            raise OrderingError(f"missing checkpoint {ck / name}; run the train stages first")
    try:
        return PlannerModels(
            dsm.load_driver_sensor(ck / DS_CKPT).model if need_ds else None,
            gen.load_generator(ck / GEN_CKPT).model if need[GEN_CKPT] else None,
            gen.load_generator(ck / GEN_OBS_CKPT).model if need[GEN_OBS_CKPT] else None)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc


# --- eval ------------------------------------------------------------------------------------------------


def write_report(cfg: RunConfig, records, loop: str) -> harness.Report:
    report = harness.aggregate_report(records)
    out = cfg.path("reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / f"report_{loop}.txt").write_text(report.table(), encoding="utf-8")
    (out / f"report_{loop}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    plotting.plot_report(report, out / f"report_{loop}.png", f"mean hindsight cost ({loop} loop)")
    return report


def cmd_eval(cfg: RunConfig, loop: str = "open", from_log: Optional[str] = None) -> harness.Report:
    if loop not in harness.LOOPS:
        raise ConfigError(f"loop must be one of {harness.LOOPS}")
    if from_log:
        try:
            records = harness.read_run_log(from_log)
        except (OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        if not records:
            raise DataError(f"{from_log} holds no records")
        return write_report(cfg, records, loop)
    replay = cfg.replay()
    models = load_models(cfg, replay.modes)
    scenes = load_split(cfg, "eval")
    records = harness.evaluate_scenes(scenes, models, cfg.planner(), replay, loops=(loop,), progress=True)
    logs = cfg.path("logs")
    logs.mkdir(parents=True, exist_ok=True)
    harness.write_run_log(logs / f"run_{loop}.ndjson", records)
    return write_report(cfg, records, loop)


# --- render ------------------------------------------------------------------------------------------------


OVERLAYS = ("ogm", "fused", "samples", "plan")


def cmd_render(cfg: RunConfig, scene_file: str, step: int, overlays: Sequence[str], out_dir: Optional[str] = None,
               mode: str = "BiVO") -> dict:
    try:
        scene = scenarios.load_scene(scene_file)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read scene {scene_file}: {exc}") from exc
    if not 0 <= step < scene.duration_steps:
        raise ConfigError(f"step {step} outside scene duration {scene.duration_steps}")
    bad = set(overlays) - set(OVERLAYS)
    if bad:
        raise ConfigError(f"unknown overlays {sorted(bad)}")
    out = Path(out_dir) if out_dir else cfg.path("reports") / "render"
    out.mkdir(parents=True, exist_ok=True)
    needs_models = {"fused", "samples"} & set(overlays) or ("plan" in overlays and mode != "NoReasoning")
    models = load_models(cfg, [PlannerMode(mode)] + ([PlannerMode.BIVO] if "samples" in overlays else [])) \
        if needs_models else PlannerModels()
    ctx = PlanningContext(scene, step, cfg.planner(), models)
    stem = f"{scene.id}_t{step:03d}"
    written = {}
    if "ogm" in overlays:
        write_pgm(out / f"{stem}_ogm.pgm", ctx.observed)
        plotting.render_overlays(ctx.observed, out / f"{stem}_ogm.png", f"{scene.id} t={step} observed")
        written["ogm"] = str(out / f"{stem}_ogm.png")
    if "fused" in overlays:
        write_pgm(out / f"{stem}_fused.pgm", ctx.fused)
        plotting.render_overlays(ctx.fused, out / f"{stem}_fused.png", f"{scene.id} t={step} fused")
        written["fused"] = str(out / f"{stem}_fused.png")
    if "samples" in overlays:
        rng = harness.step_rng(cfg.seed, scene.id, step, PlannerMode.BIVO)
        samples, _ = ctx.predicted(PlannerMode.BIVO, rng)
        drawn = plotting.render_overlays(ctx.fused, out / f"{stem}_samples.png",
                                         f"{scene.id} t={step} occluded samples", samples=samples)
        written["samples"] = str(out / f"{stem}_samples.png")
        written["samples_drawn"] = drawn["samples"]
    if "plan" in overlays:
        res = ctx.evaluate(PlannerMode(mode), harness.step_rng(cfg.seed, scene.id, step, PlannerMode(mode)))
        plotting.render_overlays(ctx.observed, out / f"{stem}_plan.png", f"{scene.id} t={step} {mode}",
                                 candidates=res.candidate_states, chosen=res.candidate_states[res.index])
        written["plan"] = str(out / f"{stem}_plan.png")
    return written


# --- bench ----------------------------------------------------------------------------------------------------


def cmd_bench(cfg: RunConfig, use_checkpoints: bool = True) -> dict:
    """Per-cycle plan() latency on a fixed occlusion scene."""
    scene = scenarios.generate_scene("occluding_truck_crossing", np.random.default_rng(cfg.seed), "bench")
    planner = cfg.planner()
    ck = cfg.path("checkpoints")
    if use_checkpoints and (ck / DS_CKPT).is_file() and (ck / GEN_CKPT).is_file():
        models = load_models(cfg, [PlannerMode.BIVO])
        source = "checkpoints"
    else:
        models = PlannerModels(dsm.DriverSensorModel(cfg.ds_config()), gen.OcclusionGenModel(cfg.gen_config()))
        source = "untrained"
    timings = []
    steps = harness.ReplayConfig().replan_steps(scene)
    for i in range(cfg.bench_repeats):
        step = steps[i % len(steps)]
        rng = np.random.default_rng([cfg.seed, i])
        t0 = time.perf_counter()
        PlanningContext(scene, step, planner, models).evaluate(PlannerMode.BIVO, rng)
        timings.append(time.perf_counter() - t0)
    ms = np.array(timings) * 1000.0
    result = {"workload": {"candidates": planner.n_candidates, "samples": planner.n_samples,
                           "grid": planner.grid, "repeats": cfg.bench_repeats, "models": source},
              "median_ms": float(np.median(ms)), "p95_ms": float(np.percentile(ms, 95)),
              "min_ms": float(ms.min()), "max_ms": float(ms.max())}
    out = cfg.path("reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


# --- argument parsing ----------------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (default: $BIVO_CONFIG)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="bivo", description="Occlusion-aware planning with generative occlusion models.")
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="write synthetic scene files and a manifest")
    g.add_argument("--split", choices=SPLITS, action="append", help="split(s) to write (default: both)")
    g.add_argument("--n", type=int, help="number of scenes per split (overrides the config)")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("stage", choices=("driversensor", "generator"))
    t.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    t.add_argument("--max-steps", type=int, help="stop after this many steps (epochs for the generator)")
    e = sub.add_parser("eval", parents=[common], help="open- or closed-loop replay and report")
    e.add_argument("--loop", choices=harness.LOOPS, default="open")
    e.add_argument("--from-log", help="rebuild the report from an existing run-log instead of replaying")
    r = sub.add_parser("render", parents=[common], help="render grids and overlays for one scene step")
    r.add_argument("scene")
    r.add_argument("--step", type=int, default=0)
    r.add_argument("--overlay", nargs="+", choices=OVERLAYS, default=["ogm"])
    r.add_argument("--mode", default="BiVO", choices=[m.value for m in PlannerMode])
    r.add_argument("--out")
    b = sub.add_parser("bench", parents=[common], help="time plan() per cycle")
    b.add_argument("--untrained", action="store_true", help="time with freshly initialised models")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "gen-data":
            m = cmd_gen_data(cfg, args.split or SPLITS, args.n)
            for split, man in m.items():
                print(f"{split}: {man['count']} scenes {man['by_template']}")
        elif args.command == "train":
            print(cmd_train(cfg, args.stage, args.resume, args.max_steps))
        elif args.command == "eval":
            report = cmd_eval(cfg, args.loop, args.from_log)
            print(report.table(), end="")
            print("---")
            print(report.to_json())
        elif args.command == "render":
            print(json.dumps(cmd_render(cfg, args.scene, args.step, args.overlay, args.out, args.mode), indent=2))
        elif args.command == "bench":
            print(json.dumps(cmd_bench(cfg, not args.untrained), indent=2))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OrderingError as exc:
        print(f"ordering error: {exc}", file=sys.stderr)
        return EXIT_ORDER
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
