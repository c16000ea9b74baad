from __future__ import annotations

import json

import numpy as np
import pytest

from bivo import harness, scenarios
from bivo.harness import EvalRecord, ReplayConfig, aggregate_report, detect_critical, run_closed_loop, run_open_loop
from bivo.planner import ALL_MODES, CostBreakdown, PlannerConfig, PlannerMode, PlanningContext
from bivo.raster import build_ground_truth_ogm, build_observed_ogm, hidden_agents, observe, snapshot

from conftest import agent, make_scene, parked
from test_raster import oracle_visibility

SHORT = ReplayConfig(max_scene_s=3.0)
FAST = PlannerConfig(n_samples=200)


def scene(kind, seed=0, **kw):
    return scenarios.generate_scene(scenarios.ScenarioTemplate(kind, **kw), np.random.default_rng(seed), kind)


def critical_truck(max_seed=40):
    for s in range(max_seed):
        sc = scene("occluding_truck_crossing", s)
        steps = harness.critical_steps(sc, ReplayConfig(max_scene_s=8.0))
        if steps:
            return sc, steps
    raise AssertionError("no critical truck scene found")


class TestScenarios:
    def test_straight_empty(self):
        sc = scene("straight_empty")
        assert sc.agents == () and sc.duration_steps == 61

    @pytest.mark.parametrize("seed", range(5))
    def test_truck_crossing_hides_exactly_one(self, seed):
        sc = scene("occluding_truck_crossing", seed)
        obs = build_observed_ogm(sc, 0, sc.ego)
        gt = build_ground_truth_ogm(sc, 0, sc.ego, 120, 120)
        vis = oracle_visibility(gt.values > 0.5, (60, 60))
        fps = snapshot(sc, 0)
        view = observe(fps, "ego", obs.center_pose, 120, 120)
        hidden = [fp.id for fp in fps if fp.id != "ego" and len(view.footprints[fp.id])
                  and not vis.ravel()[view.footprints[fp.id]].any()]
        assert hidden == ["cyclist"]
        assert [fp.id for fp in hidden_agents(view, fps, "ego")] == ["cyclist"]

    def test_seeded(self):
        a = scenarios.dumps_scene(scene("random_traffic", 3))
        b = scenarios.dumps_scene(scene("random_traffic", 3))
        assert a == b

    def test_random_traffic_never_hidden(self):
        sc = scene("random_traffic", 1)
        assert not scenarios.any_hidden(sc, range(31))

    def test_template_mix(self):
        kinds = scenarios.template_mix(100, np.random.default_rng(0), 0.1)
        assert sum(k in scenarios.OCCLUSION_TEMPLATES for k in kinds) == 10
        assert len(kinds) == 100

    def test_json_round_trip_bit_exact(self, tmp_path):
        for kind in scenarios.TEMPLATES:
            sc = scene(kind, 2)
            p = scenarios.save_scene(tmp_path / f"{kind}.json", sc)
            back = scenarios.load_scene(p)
            assert scenarios.dumps_scene(back) == p.read_text()
            for a, b in zip(sc.all_agents(), back.all_agents()):
                assert a.trajectory == b.trajectory

    def test_malformed_scene(self):
        with pytest.raises(ValueError):
            scenarios.scene_from_dict({"id": "x"})


class TestHindsight:
    def test_equals_oracle_plan_without_occlusion(self):
        sc = scene("random_traffic", 4)
        ctx = PlanningContext(sc, 2, FAST)
        res = ctx.evaluate(PlannerMode.ORACLE, None)
        assert harness.hindsight_cost(res.chosen, sc, 2, FAST).total == pytest.approx(res.chosen_cost.total,
                                                                                       abs=1e-9)
        assert harness.context_hindsight(ctx, res.index) == res.chosen_cost

    def test_oracle_lower_bound_per_step(self, tiny_models):
        models, scenes, _ = tiny_models
        recs = run_open_loop(scenes[0], ALL_MODES, models, FAST, SHORT)
        by_step = {}
        for r in recs:
            by_step.setdefault(r.step, {})[r.mode] = r.hindsight.total
        for totals in by_step.values():
            assert all(totals["Oracle"] <= v for v in totals.values())

    def test_hidden_agent_raises_hindsight_collision(self):
        sc, steps = critical_truck()
        ctx = PlanningContext(sc, steps[0], PlannerConfig())
        nr = ctx.evaluate(PlannerMode.NO_REASONING, None)
        hs = harness.hindsight_cost(nr.chosen, sc, steps[0])
        assert hs.collision > nr.chosen_cost.collision

    def test_past_scene_end(self):
        sc = scene("straight_empty")
        with pytest.raises(ValueError):
            harness.hindsight_cost(np.zeros((11, 5)), sc, 55)


class TestOpenLoop:
    def test_straight_empty_modes_agree(self, tiny_models):
        models, _, _ = tiny_models
        sc = scene("straight_empty")
        recs = run_open_loop(sc, ALL_MODES, models, FAST, SHORT)
        assert len(recs) == len(ALL_MODES) * len(SHORT.replan_steps(sc))
        nr = [r for r in recs if r.mode == "NoReasoning"]
        orc = [r for r in recs if r.mode == "Oracle"]
        assert [(r.index, r.hindsight) for r in nr] == [(r.index, r.hindsight) for r in orc]
        assert not any(r.critical for r in recs)

    def test_shared_candidates(self, tiny_models):
        models, scenes, _ = tiny_models
        recs = run_open_loop(scenes[1], ALL_MODES, models, FAST, SHORT)
        for step in {r.step for r in recs}:
            assert len({r.candidates_hash for r in recs if r.step == step}) == 1

    def test_replan_steps(self):
        sc = scene("straight_empty")
        assert ReplayConfig().replan_steps(sc) == list(range(30))
        assert ReplayConfig(replan_period_s=1.0).replan_steps(sc) == list(range(0, 30, 2))
        with pytest.raises(ValueError):
            ReplayConfig(replan_period_s=6.0)


class TestClosedLoop:
    def test_straight_empty_tracks_centerline(self, tiny_models):
        models, _, _ = tiny_models
        sc = scene("straight_empty")
        for mode in ALL_MODES:
            res = run_closed_loop(sc, mode, models, FAST, ReplayConfig(max_scene_s=6.0))
            assert np.max(np.abs(res.executed[:, 1])) < 0.5
            assert res.duration_s <= 15.0

    def test_duration_cap_and_determinism(self, tiny_models):
        models, scenes, _ = tiny_models
        a = run_closed_loop(scenes[2], "BiVO", models, FAST)
        b = run_closed_loop(scenes[2], "BiVO", models, FAST)
        assert a.duration_s <= 15.0
        assert harness.dumps_records(a.records) == harness.dumps_records(b.records)
        np.testing.assert_array_equal(a.executed, b.executed)


class TestCritical:
    def test_straight_empty(self):
        assert not detect_critical(scene("straight_empty"))

    def test_truck_crossing_is_critical(self):
        sc, steps = critical_truck()
        assert steps and detect_critical(sc, ReplayConfig(max_scene_s=8.0))

    def test_hidden_agent_far_from_corridor(self):
        n = 61
        ego = scenarios.constant_velocity(0.0, 0.0, 0.0, 8.0, n)
        truck = agent("truck", parked(20.0, -8.0, n), length=8.0, width=3.0)
        ped = agent("ped", parked(30.0, -13.0, n), kind="pedestrian", length=0.6, width=0.6)
        sc = make_scene([truck, ped], ego, "far")
        ctx = PlanningContext(sc, 0)
        assert ctx.hidden_ids == ("ped",)
        assert not detect_critical(sc)


def rec(scene_id, mode, total, critical=False, loop="open", step=0):
    c = CostBreakdown(0.0, 0.0, 0.0, 0.0, total)
    return EvalRecord(scene_id, step, mode, loop, c, c, critical, 0)


class TestReport:
    def test_single_record(self):
        r = aggregate_report([rec("s", "BiVO", 2.5)])
        assert r.rows["BiVO"]["all"]["mean"] == 2.5

    def test_oracle_delta_zero(self):
        r = aggregate_report([rec("s", "Oracle", 2.0), rec("s", "BiVO", 3.0)])
        assert r.rows["Oracle"]["all"]["delta_pct"] == 0.0
        assert r.rows["BiVO"]["all"]["delta_pct"] == pytest.approx(50.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate_report([])

    def test_independent_recomputation(self):
        rng = np.random.default_rng(0)
        recs = [rec(f"s{i}", m.value, float(rng.uniform(1, 10)), critical=i % 3 == 0, loop=loop, step=k)
                for i in range(12) for m in ALL_MODES for k in range(3) for loop in ("open", "closed")]
        report = aggregate_report(recs)
        rows = [r.to_dict() for r in recs]
        for mode in [m.value for m in ALL_MODES]:
            for subset, keep in (("all", lambda d: d["loop"] == "open"),
                                 ("critical", lambda d: d["loop"] == "open" and d["critical"]),
                                 ("closed", lambda d: d["loop"] == "closed")):
                def mean(m):
                    vals = [d["hindsight"]["total"] for d in rows if d["mode"] == m and keep(d)]
                    return sum(vals) / len(vals)
                want = (mean(mode) - mean("Oracle")) / mean("Oracle") * 100
                assert report.rows[mode][subset]["mean"] == pytest.approx(mean(mode), abs=1e-9)
                assert report.rows[mode][subset]["delta_pct"] == pytest.approx(want, abs=1e-9)

    def test_run_log_round_trip_reproduces_report(self, tmp_path):
        recs = [rec("a", "BiVO", 1.25, True), rec("a", "Oracle", 1.0, True), rec("b", "BiVO", 0.3)]
        p = harness.write_run_log(tmp_path / "run.ndjson", recs)
        back = harness.read_run_log(p)
        assert back == recs
        assert aggregate_report(back).to_json() == aggregate_report(recs).to_json()
        assert all(json.loads(line) for line in p.read_text().splitlines())

    def test_bad_run_log(self, tmp_path):
        (tmp_path / "bad.ndjson").write_text('{"scene_id": 1}\n')
        with pytest.raises(ValueError):
            harness.read_run_log(tmp_path / "bad.ndjson")

    def test_paired_gap(self):
        recs = [rec(f"s{i}", "NoReasoning", 2.0 + i, True) for i in range(4)]
        recs += [rec(f"s{i}", "BiVO", 1.0 + i + 0.1 * i, True) for i in range(4)]
        mean, se, n = harness.paired_scene_gap(recs, "NoReasoning", "BiVO")
        assert n == 4 and mean == pytest.approx(np.mean([-1 + 0.1 * i for i in range(4)]))
        assert se == pytest.approx(np.std([0.1 * i for i in range(4)], ddof=1) / 2)
