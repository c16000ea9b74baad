"""Exit criteria. Each test appends one PASS/FAIL line to the terminal summary."""

from __future__ import annotations

import time
from dataclasses import replace

import numpy as np
import pytest

from bivo import cli, harness, nn, scenarios
from bivo import driver_sensor as dsm
from bivo import generator as gen
from bivo.driver_sensor import combine_arrays, dempster_combine, BeliefCell
from bivo.harness import ReplayConfig
from bivo.planner import ALL_MODES, PlannerMode, PlanningContext, plan
from bivo.raster import OCCLUDED, visibility_mask
from bivo.world import Trajectory, kinematically_feasible

from conftest import ACCEPTANCE_LINES
from test_raster import oracle_visibility, random_grid

pytestmark = pytest.mark.slow

PI_E_GRID = (0.05, 0.1, 0.2, 0.3, 0.5, 1.0)


def record(n: int, name: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} {n}: {name} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def occlusion_scenes(n: int, seed: int, prefix: str) -> list:
    kinds = scenarios.OCCLUSION_TEMPLATES
    return [scenarios.generate_scene(kinds[i % len(kinds)], np.random.default_rng([seed, i]), f"{prefix}{i:03d}")
            for i in range(n)]


def test_1_visibility_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(100):
        occ = random_grid(rng)
        viewer = (int(rng.integers(0, 50)), int(rng.integers(0, 50)))
        occ[viewer] = False
        mismatches += int(not np.array_equal(visibility_mask(occ, viewer), oracle_visibility(occ, viewer)))
    dt = time.perf_counter() - t0
    record(1, "visibility equals 0.1-substep oracle", mismatches == 0 and dt < 10.0,
           f"{mismatches}/100 grids differ, {dt:.1f} s (limit 10 s)")


def test_2_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ds_cfg = dsm.DriverSensorConfig(n_classes=3, hidden=6, history_steps=2, grid=4, seed=1)
    ds_model = dsm.DriverSensorModel(ds_cfg)
    h = rng.normal(size=(4, ds_cfg.input_width))
    g = (rng.random((4, ds_cfg.grid ** 2)) < 0.3).astype(float)

    def ds_fn(p):
        return dsm._ds_loss_graph(ds_model, p, h, g, 0.4, np.random.default_rng(7), 0.8)[0]

    _, _, grads = nn.value_and_grad(ds_fn, ds_model.params)
    ds_err = nn.relative_error(grads, nn.finite_difference_grad(lambda p: float(ds_fn(p).data), ds_model.params))

    g_cfg = gen.GeneratorConfig(latent=3, hidden=8, grid=8, horizon_steps=3, seed=4)
    g_model = gen.OcclusionGenModel(g_cfg)
    g_model.params = {k: v + rng.normal(0, 0.05, v.shape) for k, v in g_model.params.items()}
    trajs = rng.normal(size=(4, g_cfg.n_states, 4)) * [5.0, 5.0, 0.5, 3.0]
    cond = rng.random((4, g_cfg.cond_width))

    def gen_fn(p):
        return gen._elbo_graph(g_model, p, trajs, cond, np.random.default_rng(3))[0]

    _, _, grads = nn.value_and_grad(gen_fn, g_model.params)
    gen_err = nn.relative_error(grads, nn.finite_difference_grad(lambda p: float(gen_fn(p).data), g_model.params))
    dt = time.perf_counter() - t0
    record(2, "loss gradients match central differences", ds_err < 1e-4 and gen_err < 1e-4 and dt < 60.0,
           f"rel err ds {ds_err:.2e}, gen {gen_err:.2e} (limit 1e-4), {dt:.1f} s (limit 60 s)")


def test_3_dempster_algebra():
    rng = np.random.default_rng(5)
    a, b, c = (tuple(rng.dirichlet(np.ones(3), 10_000).T) for _ in range(3))
    ab, ba = np.array(combine_arrays(a, b)), np.array(combine_arrays(b, a))
    left = np.array(combine_arrays(tuple(combine_arrays(a, b)), c))
    right = np.array(combine_arrays(a, tuple(combine_arrays(b, c))))
    comm, assoc = np.abs(ab - ba).max(), np.abs(left - right).max()
    hand = dempster_combine(BeliefCell(0.8, 0.2, 0.0), BeliefCell(0.8, 0.2, 0.0)).mass_occupied
    record(3, "Dempster combination algebra", comm <= 1e-9 and assoc <= 1e-9 and abs(hand - 0.9412) <= 1e-4,
           f"commutativity {comm:.1e}, associativity {assoc:.1e} over 1e4 cells; 0.8+0.8 -> {hand:.4f}")


def test_4_filter_postcondition(trained_pipeline):
    p = trained_pipeline
    limits = p.cfg.limits()
    scenes = occlusion_scenes(20, 41, "filter")
    survivors = bad = 0
    for sc in scenes:
        ctx = PlanningContext(sc, 0, p.cfg.planner(), p.models)
        obs = ctx.observed.values
        G = obs.shape[0]
        out = gen.sample_trajectories(p.fused.model, ctx.road, ctx.fused, ctx.observed, 1000, p.cfg.pi_e, limits,
                                      np.random.default_rng(0))
        for w in out:
            x0, y0 = w.trajectory.data[0, :2]
            r, c = int(np.floor(y0)) + G // 2, int(np.floor(x0)) + G // 2
            ok = 0 <= r < G and 0 <= c < G and obs[r, c] == OCCLUDED
            ok &= kinematically_feasible(Trajectory("s", 0, w.trajectory.dt, w.trajectory.data), limits)
            bad += int(not ok)
        survivors += len(out)
    record(4, "every surviving sample starts occluded and is feasible", bad == 0 and survivors > 0,
           f"{survivors} survivors of 20x1000 samples, {bad} violations")


def test_5_zero_prior_matches_no_reasoning(trained_pipeline):
    p = trained_pipeline
    planner = replace(p.cfg.planner(), pi_e=0.0)
    replay = ReplayConfig(modes=(PlannerMode.BIVO, PlannerMode.NO_REASONING))
    scenes = scenarios.generate_batch(25, seed=51, occluded_fraction=0.1) + occlusion_scenes(25, 52, "zero")
    steps = diffs = sampled = 0
    for sc in scenes:
        recs = harness.run_open_loop(sc, replay.modes, p.models, planner, replay)
        by = {(r.step, r.mode): r for r in recs}
        for step in replay.replan_steps(sc):
            b, n = by[(step, "BiVO")], by[(step, "NoReasoning")]
            steps += 1
            sampled += int(b.samples > 0)
            diffs += int(b.index != n.index)
    record(5, "BiVO at pi_e=0 reproduces NoReasoning", diffs == 0 and sampled > 0,
           f"{diffs} index differences over {steps} steps of 50 scenes ({sampled} steps with samples)")


def test_6_oracle_lower_bound(trained_pipeline):
    p = trained_pipeline
    t0 = time.perf_counter()
    scenes = scenarios.generate_batch(200, seed=61, occluded_fraction=0.5)
    records = harness.evaluate_scenes(scenes, p.models, p.cfg.planner(), p.cfg.replay())
    report = harness.aggregate_report(records)
    dt = time.perf_counter() - t0
    worst = []
    for subset in ("all", "critical"):
        oracle = report.rows["Oracle"][subset]["mean"]
        others = [report.rows[m.value][subset]["mean"] for m in ALL_MODES if m is not PlannerMode.ORACLE]
        worst.append((subset, oracle, min(others)))
    ok = all(o <= m for _, o, m in worst) and dt < 600
    record(6, "Oracle mean hindsight bounds every mode", ok,
           ", ".join(f"{s}: oracle {o:.4f} <= min other {m:.4f}" for s, o, m in worst)
           + f"; 200 scenes in {dt:.0f} s (limit 600 s)")


def _sweep(scenes, models, planner, replay):
    """Per critical scene: mean NoReasoning hindsight and mean BiVO hindsight for each pi_e."""
    nr, bivo = [], {pi: [] for pi in PI_E_GRID}
    for sc in scenes:
        if not harness.detect_critical(sc, replay, planner):
            continue
        per, base = {pi: [] for pi in PI_E_GRID}, []
        for step in replay.replan_steps(sc):
            ctx = PlanningContext(sc, step, planner, models)
            base.append(harness.context_hindsight(ctx, ctx.evaluate(PlannerMode.NO_REASONING, None).index).total)
            for pi in PI_E_GRID:
                res = ctx.evaluate(PlannerMode.BIVO, harness.step_rng(replay.seed, sc.id, step, PlannerMode.BIVO),
                                   pi_e=pi)
                per[pi].append(harness.context_hindsight(ctx, res.index).total)
        nr.append(np.mean(base))
        for pi in PI_E_GRID:
            bivo[pi].append(np.mean(per[pi]))
    return np.array(nr), {pi: np.array(v) for pi, v in bivo.items()}


def test_7_bivo_beats_no_reasoning_on_critical_scenes(trained_pipeline):
    p = trained_pipeline
    t0 = time.perf_counter()
    planner = p.cfg.planner()
    replay = replace(p.cfg.replay(), modes=(PlannerMode.BIVO, PlannerMode.NO_REASONING))
    nr, bivo = _sweep(occlusion_scenes(100, 71, "val"), p.models, planner, replay)

    def upper_bound(pi):
        d = bivo[pi] - nr
        return float(np.mean(d) + 2 * np.std(d, ddof=1) / np.sqrt(len(d)))
    pi_e = min(PI_E_GRID, key=upper_bound)

    records = []
    for sc in occlusion_scenes(300, 73, "test"):
        if harness.detect_critical(sc, replay, planner):
            records += harness.run_open_loop(sc, replay.modes, p.models, replace(planner, pi_e=pi_e), replay)
    gap, se, n = harness.paired_scene_gap(records, "NoReasoning", "BiVO")
    report = harness.aggregate_report(records)
    dt = p.train_seconds + time.perf_counter() - t0
    ok = len(p.data) >= 2000 and n >= 50 and gap < 0 and -gap > 2 * se and dt < 1800
    record(7, "BiVO below NoReasoning on critical scenes", ok,
           f"pi_e={pi_e} (validation), held-out critical scenes {n}, mean BiVO {report.rows['BiVO']['critical']['mean']:.4f}"
           f" vs NoReasoning {report.rows['NoReasoning']['critical']['mean']:.4f}, paired gap {gap:.4f} "
           f"(2 SE = {2 * se:.4f}); {len(p.data)} training samples; {dt:.0f} s incl. training (limit 1800 s)")


def test_8_conditioning_improves_test_elbo(trained_pipeline):
    p = trained_pipeline
    conditioned, unconditioned = [], []
    for seed in range(3):
        train, test = cli.split_by_scene(p.data, p.cfg.gen_test_fraction, seed)
        for cond, out in (("fused", conditioned), ("none", unconditioned)):
            if seed == p.cfg.seed and cond == "fused":
                out.append(gen.evaluate_elbo(p.fused.model, p.test))
                continue
            cfg = replace(p.cfg.gen_config(cond), seed=seed)
            out.append(gen.evaluate_elbo(gen.train_generator(train, cfg).model, test))
    ok = np.mean(conditioned) <= np.mean(unconditioned)
    record(8, "conditioned generator test ELBO <= unconditioned", ok,
           f"fused {np.round(conditioned, 2).tolist()} (mean {np.mean(conditioned):.2f}) vs "
           f"none {np.round(unconditioned, 2).tolist()} (mean {np.mean(unconditioned):.2f}), 3 seeds")


def test_9_critical_frequency():
    scenes = scenarios.generate_batch(200, seed=91, occluded_fraction=0.1)
    flags = [harness.detect_critical(sc) for sc in scenes]
    frac = float(np.mean(flags))
    record(9, "critical-scene frequency on the 90/10 mix", 0.05 <= frac <= 0.15,
           f"{sum(flags)}/200 = {frac:.1%} (band 5%..15%)")


def test_10_latency(trained_pipeline):
    p = trained_pipeline
    cfg = p.cfg.planner()
    assert cfg.n_candidates == 64 and cfg.n_samples == 1000
    sc = scenarios.generate_scene("occluding_truck_crossing", np.random.default_rng(0), "latency")
    models = p.models
    plan(sc, 0, PlannerMode.BIVO, models, cfg)  # warm caches
    ms = []
    for i in range(30):
        t0 = time.perf_counter()
        plan(sc, i % 20, PlannerMode.BIVO, models, cfg, np.random.default_rng(i))
        ms.append((time.perf_counter() - t0) * 1000)
    med = float(np.median(ms))
    record(10, "plan() latency, J=64, K=1000", med < 50.0,
           f"median {med:.1f} ms, p95 {np.percentile(ms, 95):.1f} ms over 30 calls (limit 50 ms)")


PIPELINE = ["train_scenes=24", "eval_scenes=6", "eval_occluded_fraction=0.5", "ds_steps=150", "ds_classes=16",
            "ds_hidden=64", "gen_epochs=2", "gen_hidden=64", "gen_latent=8", "samples=300", "max_scene_s=4.0",
            "seed=11"]


def _run_pipeline(workdir) -> bytes:
    flags = [a for kv in PIPELINE + [f"workdir={workdir}"] for a in ("--set", kv)]
    for args in (["gen-data"], ["train", "driversensor"], ["train", "generator"], ["eval"],
                 ["eval", "--loop", "closed"]):
        assert cli.main(args + flags) == cli.EXIT_OK, args
    return b"".join((workdir / "logs" / f"run_{loop}.ndjson").read_bytes() for loop in ("open", "closed"))


def test_11_determinism(tmp_path):
    a = _run_pipeline(tmp_path / "a")
    b = _run_pipeline(tmp_path / "b")
    record(11, "full pipeline run-logs byte-identical", a == b and len(a) > 0,
           f"{len(a)} bytes of open+closed run-log, identical={a == b}")
