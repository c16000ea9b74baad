from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bivo import scenarios
from bivo.generator import WeightedTrajectory
from bivo.planner import (CostBreakdown, CostWeights, PlannerConfig, PlannerMode, PlanningContext, collision_cost,
                          cost_components, plan, rbf_sum, sample_terminals, select, spline_connect,
                          spline_connect_batch)
from bivo.world import ControlLimits, Lane, LaneGraph, Trajectory, feasibility_mask

from conftest import agent, make_scene, parked

LIMITS = ControlLimits()


def straight_lane(length=200.0, y=0.0, lid="a", succ=()):
    xs = np.arange(0.0, length + 0.5, 1.0)
    return Lane(lid, np.stack([xs, np.full_like(xs, y), np.zeros_like(xs)], axis=1), succ)


def fork_graph():
    a = straight_lane(20.0, lid="a", succ=("b", "c"))
    xs = np.arange(20.0, 120.5, 1.0)
    b = Lane("b", np.stack([xs, np.zeros_like(xs), np.zeros_like(xs)], axis=1))
    ang = np.linspace(0, math.pi / 2, 160)
    r = 50.0
    pts = np.stack([20 + r * np.sin(ang), r - r * np.cos(ang), ang], axis=1)
    c = Lane("c", pts)
    return LaneGraph([a, b, c])


class TestTerminals:
    def test_single_lane(self):
        g = LaneGraph([straight_lane()])
        t = sample_terminals(g, np.array([0.0, 0, 0, 10.0, 0]), 5, 5.0, LIMITS)
        assert len(t) == 5
        np.testing.assert_allclose(t[:, 1], 0.0)
        np.testing.assert_allclose(t[:, 3], [0, 3.75, 7.5, 11.25, 15.0])

    @given(st.floats(0.0, 20.0), st.integers(1, 80))
    @settings(max_examples=30, deadline=None)
    def test_arc_bound(self, v0, J):
        g = fork_graph()
        t = sample_terminals(g, np.array([0.0, 0, 0, v0, 0]), J, 5.0, LIMITS, (-1.0, 0.0, 1.0))
        assert 1 <= len(t) <= J
        # reachable arc never exceeds horizon * max_speed; straight-line distance is a lower bound on arc
        assert np.all(np.hypot(t[:, 0], t[:, 1]) <= 5.0 * LIMITS.max_speed + 1.0 + 1e-9)

    def test_fork_reaches_both_branches(self):
        g = fork_graph()
        t = sample_terminals(g, np.array([0.0, 0, 0, 12.0, 0]), 10, 5.0, LIMITS)
        far = t[t[:, 3] > 10]
        assert np.any(np.abs(far[:, 1]) < 1e-6) and np.any(far[:, 1] > 5.0)

    def test_fallback_straight_ahead(self):
        g = LaneGraph([straight_lane(y=50.0)])
        t = sample_terminals(g, np.array([0.0, 0, math.pi / 2, 4.0, 0]), 5, 5.0, LIMITS)
        np.testing.assert_allclose(t[:, 0], 0.0, atol=1e-9)
        assert np.all(t[:, 1] >= 0)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            sample_terminals(LaneGraph([straight_lane()]), np.zeros(5), 0, 5.0)


class TestSpline:
    def test_degenerate_is_constant(self):
        s = np.array([3.0, 4.0, 0.7, 0.0, 0.0])
        tr = spline_connect(s, s, 10, 0.5)
        np.testing.assert_allclose(tr.data[:, :2], np.tile([3.0, 4.0], (11, 1)))
        np.testing.assert_allclose(tr.data[:, 3], 0.0)

    def test_straight_constant_velocity(self):
        s = np.array([0.0, 0.0, 0.0, 8.0, 0.0])
        e = np.array([40.0, 0.0, 0.0, 8.0, 0.0])
        d = spline_connect(s, e, 10, 0.5).data
        assert np.max(np.abs(d[:, 1])) < 1e-9
        np.testing.assert_allclose(d[:, 0], np.arange(11) * 4.0, atol=1e-9)
        np.testing.assert_allclose(d[:, 3], 8.0, atol=1e-9)
        np.testing.assert_allclose(d[:, 4], 0.0, atol=1e-9)

    @given(st.lists(st.floats(-50, 50), min_size=8, max_size=8))
    def test_endpoints(self, v):
        s = np.array([v[0], v[1], v[2] / 10, abs(v[3]) / 3, 0.0])
        e = np.array([v[4], v[5], v[6] / 10, abs(v[7]) / 3, 0.0])
        d = spline_connect_batch(s, e[None], 10, 0.5)[0]
        assert np.hypot(*(d[0, :2] - s[:2])) < 1e-9
        assert np.hypot(*(d[-1, :2] - e[:2])) < 1e-9

    def test_speed_matches_position_differences(self):
        s = np.array([0.0, 0.0, 0.0, 6.0, 0.0])
        e = np.array([30.0, 3.5, 0.0, 9.0, 0.0])
        d = spline_connect(s, e, 40, 0.125).data
        fd = np.hypot(*np.diff(d[:, :2], axis=0).T) / 0.125
        np.testing.assert_allclose(fd, 0.5 * (d[1:, 3] + d[:-1, 3]), rtol=2e-3)

    def test_too_few_steps(self):
        with pytest.raises(ValueError):
            spline_connect(np.zeros(5), np.zeros(5), 1, 0.5)


class TestCosts:
    g = LaneGraph([straight_lane()])

    def test_on_centerline(self):
        c = np.zeros((11, 5))
        c[:, 0] = np.arange(11) * 4.0
        c[:, 3] = 8.0
        out = cost_components(c[None], self.g, c[-1, :2])[0]
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_hand_point(self):
        c = np.array([[[10.0, 1.0, 0.1, 0.0, 0.0]]])
        heading, lane_dev, effort, goal = cost_components(c, self.g, np.array([10.0, 1.0]),
                                                          CostWeights(1, 1, 1, 1, 1))[0]
        assert lane_dev == pytest.approx(1.0)
        assert heading == pytest.approx(0.01)
        assert effort == 0.0 and goal == 0.0

    def test_goal_and_effort(self):
        c = np.zeros((1, 3, 5))
        c[0, :, 4] = [1.0, 2.0, 0.0]
        out = cost_components(c, self.g, np.array([3.0, 4.0]), CostWeights(0, 0, 0.5, 1, 2))[0]
        assert out[2] == pytest.approx(0.5 * 5.0)
        assert out[3] == pytest.approx(2 * 5.0)

    def test_breakdown_total(self):
        b = CostBreakdown(1.0, 2.0, 0.5, 4.0, 0.25)
        assert b.total == 7.75 and b.as_dict()["total"] == 7.75

    def test_weights_validated(self):
        with pytest.raises(ValueError):
            CostWeights(w_col=-1)
        with pytest.raises(ValueError):
            CostWeights(rbf_sigma=0)


class TestCollision:
    ego = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5), np.full(5, 2.0), np.zeros(5)], axis=1)

    def test_empty(self):
        assert collision_cost(self.ego, []) == 0.0

    def test_coincident_visible_step(self):
        other = np.full((5, 5), 1000.0)
        other[2, :2] = self.ego[2, :2]
        assert collision_cost(self.ego, [other], weights=CostWeights(w_col=10, rbf_sigma=0.7)) == pytest.approx(10.0)

    def test_weighted_prediction(self):
        other = np.full((5, 5), 1000.0)
        other[3, :2] = self.ego[3, :2]
        wt = WeightedTrajectory(Trajectory("o", 0, 0.5, other), 0.001)
        assert collision_cost(self.ego, [], [wt]) == pytest.approx(10.0 * 0.001)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            collision_cost(self.ego, [np.zeros((4, 5))])
        with pytest.raises(ValueError):
            rbf_sum(self.ego[None], np.zeros((1, 6, 2)), 2.0)

    def test_nan_rows_ignored(self):
        other = np.full((5, 2), np.nan)
        other[0] = self.ego[0, :2]
        assert rbf_sum(self.ego[None], other[None], 2.0)[0] == pytest.approx(1.0)

    @given(st.floats(0.0, 20.0), st.floats(0.0, 20.0))
    def test_monotone_in_distance(self, d1, d2):
        def cost(d):
            other = np.full((5, 5), 1000.0)
            other[2, :2] = self.ego[2, :2] + [0.0, d]
            return collision_cost(self.ego, [other])
        lo, hi = sorted((d1, d2))
        assert cost(lo) >= cost(hi)


class TestSelect:
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.floats(-1e3, 1e3))
    def test_argmin_properties(self, totals, shift):
        t = np.array(totals)
        i = select(t)
        assert np.all(t[i] <= t)
        assert t[i] < t[:i].min() if i else True
        assert select(np.round(t) + np.round(shift)) == select(np.round(t))

    def test_ties_take_first(self):
        assert select(np.array([2.0, 1.0, 1.0])) == 1


def occluded_pedestrian_scene(visible: bool):
    """Ego accelerating from rest; an agent waits on the ego's path for steps 6..10, either
    in plain view or hidden behind a parked truck at planning time."""
    n = 11
    t = np.arange(n) * 0.5
    ego = scenarios.states_from_path(np.stack([0.5 * t ** 2, np.zeros(n)], axis=1), 0.0)
    ego[0, 3] = 0.0
    truck = agent("truck", parked(6.0, -3.5, n), length=6.0, width=2.5)
    path_x = 0.5 * t ** 2
    states = parked(10.0 if visible else 8.0, 0.0 if visible else -6.5, n)
    if not visible:
        states[6:, 0] = path_x[6:]
        states[6:, 1] = 0.0
    ped = agent("ped", states, kind="pedestrian", length=0.6, width=0.6)
    return make_scene([truck, ped], ego, "hand")


HAND_CFG = PlannerConfig(n_candidates=2, lateral_offsets=(0.0,), speed_fractions=(0.0, 1.0),
                         weights=CostWeights(w_hd=1, w_vd=1, w_ef=0.1, w_col=10, w_goal=1))


class TestPlan:
    def test_hand_scene_visible_agent(self):
        sc = occluded_pedestrian_scene(visible=True)
        ctx = PlanningContext(sc, 0, HAND_CFG)
        assert ctx.hidden_ids == ()
        assert ctx.evaluate("NoReasoning", np.random.default_rng(0)).index == 0
        assert ctx.evaluate("Oracle", np.random.default_rng(0)).index == 0

    def test_hand_scene_occluded_agent(self):
        sc = occluded_pedestrian_scene(visible=False)
        ctx = PlanningContext(sc, 0, HAND_CFG)
        assert ctx.hidden_ids == ("ped",)
        assert ctx.candidates[1, -1, 0] == pytest.approx(12.5)
        assert ctx.evaluate("NoReasoning", np.random.default_rng(0)).index == 1
        assert ctx.evaluate("Oracle", np.random.default_rng(0)).index == 0

    def test_single_candidate_returned(self):
        sc = occluded_pedestrian_scene(visible=True)
        cfg = PlannerConfig(n_candidates=1, lateral_offsets=(0.0,), speed_fractions=(1.0,))
        r = plan(sc, 0, "NoReasoning", config=cfg)
        assert len(r.candidate_states) == 1 and r.index == 0 and not r.emergency

    def test_emergency_braking(self):
        sc = occluded_pedestrian_scene(visible=True)
        cfg = PlannerConfig(limits=ControlLimits(max_accel=1e-3, min_accel=-1e-3, max_speed=20, max_curvature=0.3),
                            speed_fractions=(1.0,))
        r = plan(sc, 0, "NoReasoning", config=cfg, ego_state=np.array([0.0, 0.0, 0.0, 10.0, 0.0]))
        assert r.emergency and len(r.candidate_states) == 1
        assert r.candidate_states[0, -1, 3] < 10.0

    def test_candidates_feasible_and_shared(self, tiny_models):
        models, scenes, _ = tiny_models
        sc = scenes[0]
        ctx = PlanningContext(sc, 4, PlannerConfig(n_samples=200), models)
        assert feasibility_mask(ctx.candidates, 0.5, LIMITS).all()
        results = [ctx.evaluate(m, np.random.default_rng(1)) for m in PlannerMode]
        for r in results:
            assert r.candidate_states is ctx.candidates
            assert np.all(r.totals[r.index] <= r.totals)
            np.testing.assert_array_equal(r.totals, [CostBreakdown.from_row(c).total for c in r.costs])

    def test_pi_e_zero_matches_no_reasoning(self, tiny_models):
        models, scenes, _ = tiny_models
        for sc in scenes[:3]:
            ctx = PlanningContext(sc, 6, PlannerConfig(n_samples=200), models)
            a = ctx.evaluate("BiVO", np.random.default_rng(2), pi_e=0.0)
            b = ctx.evaluate("NoReasoning", np.random.default_rng(2))
            assert a.index == b.index
            np.testing.assert_array_equal(a.totals, b.totals)

    def test_heuristic_weights(self, tiny_models):
        models, scenes, _ = tiny_models
        ctx = PlanningContext(scenes[0], 6, PlannerConfig(dsh_threshold=0.0), models)
        states, w = ctx.predicted(PlannerMode.DRIVER_SENSOR_HEURISTIC, np.random.default_rng(0))
        if len(w):
            assert len(w) <= 3
            np.testing.assert_allclose(w, 0.1 / len(w))
            np.testing.assert_allclose(states[:, :, 3], 5.0)

    def test_missing_model(self):
        sc = occluded_pedestrian_scene(visible=False)
        with pytest.raises(RuntimeError):
            plan(sc, 0, "BiVO")
