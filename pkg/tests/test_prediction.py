"""Goal recognition: inverse-planning posterior and GRIT trees."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planstack import prediction as pred
from planstack.prediction import (Counterexample, FEATURE_SCHEMA,
                                  GoalHypothesis, TreeProperty, agent_features,
                                  extract_goals, goal_posterior, grit_infer,
                                  grit_train, grit_verify, load_dataset,
                                  posterior_from_costs, predict_trajectories,
                                  profile_cost, trapezoid_speeds,
                                  trees_from_json, trees_to_json)
from planstack.world import AgentState, Trajectory

from conftest import make_scenario


# ---------------------------------------------------------------------------
# goal hypotheses and motion profiles


def test_extract_goals_keeps_goals_ahead():
    sc = make_scenario(goals=({"s": 50.0}, {"s": 290.0}))
    agent = AgentState(100.0, 0.0, 0.0, 10.0)
    goals = extract_goals(sc, agent)
    ss = {g.s for g in goals}
    assert 50.0 not in ss            # already passed
    assert 290.0 in ss


def test_extract_goals_always_offers_corridor_end():
    sc = make_scenario(goals=())
    goals = extract_goals(sc, sc.ego)
    assert len(goals) == 1
    assert goals[0].s == pytest.approx(sc.corridor.length)


def test_trapezoid_ramps_and_holds():
    v = trapezoid_speeds(v0=5.0, v_ref=10.0, a_max=2.0, a_min=-5.0,
                         n_steps=40, dt=0.1)
    assert v[0] == 5.0
    assert np.all(np.diff(v) <= 2.0 * 0.1 + 1e-12)
    assert v[-1] == pytest.approx(10.0)


def test_trapezoid_brakes_for_distance():
    v = trapezoid_speeds(v0=10.0, v_ref=10.0, a_max=2.0, a_min=-5.0,
                         n_steps=60, dt=0.1, distance=15.0)
    assert v[-1] == pytest.approx(0.0, abs=1e-9)
    # explicit-Euler braking onset overshoots by at most a step or two
    assert np.sum(v[:-1]) * 0.1 <= 15.0 * 1.15


def test_profile_cost_zero_at_reference():
    assert profile_cost([10.0] * 5, v_ref=10.0, dt=0.1) == 0.0
    assert profile_cost([8.0] * 5, v_ref=10.0, dt=0.1) > 0.0


# ---------------------------------------------------------------------------
# inverse-planning posterior


def _observed(xs, speed=10.0):
    states = tuple(AgentState(x, 0.0, 0.0, speed) for x in xs)
    return Trajectory(states, ((0.0, 0.0),) * (len(states) - 1))


def test_posterior_normalizes():
    sc = make_scenario(goals=({"s": 100.0}, {"s": 290.0}))
    goals = extract_goals(sc, AgentState(0.0, 0.0, 0.0, 10.0))
    post = goal_posterior(_observed([0.0, 1.0, 2.0]), goals, sc)
    total = sum(p for _, p in post.probs)
    assert abs(total - 1.0) < 1e-9


def test_zero_length_observation_returns_prior():
    sc = make_scenario(goals=({"s": 100.0}, {"s": 290.0}))
    goals = extract_goals(sc, AgentState(0.0, 0.0, 0.0, 10.0))
    post = goal_posterior(_observed([0.0]), goals, sc)
    for _, p in post.probs:
        assert p == pytest.approx(0.5, abs=1e-9)


def test_decelerating_agent_favors_near_goal():
    sc = make_scenario(goals=({"s": 40.0}, {"s": 290.0}), horizon_steps=30)
    goals = extract_goals(sc, AgentState(0.0, 0.0, 0.0, 10.0))
    near = next(g for g in goals if g.s == 40.0)
    # braking hard approaching s=40: stopping there is the rational move
    xs, v = [0.0], 10.0
    for _ in range(12):
        v = max(0.0, v - 0.5)
        xs.append(xs[-1] + 0.1 * v)
    states = tuple(AgentState(x, 0.0, 0.0, max(0.0, 10.0 - 0.5 * i))
                   for i, x in enumerate(xs))
    obs = Trajectory(states, ((0.0, 0.0),) * (len(states) - 1))
    post = goal_posterior(obs, goals, sc, beta=1.0)
    assert post.argmax == near.id


def test_posterior_threshold_matches_analytic_gap():
    """P(g1) > 0.9 with two equal-prior goals iff the cost gap passes
    ln(9)/beta; checked on synthetic cost gaps around the boundary."""
    goals = [GoalHypothesis("g1", 100.0), GoalHypothesis("g2", 200.0)]
    prior = np.array([0.5, 0.5])
    for beta in (0.5, 1.0, 4.0):
        gap = math.log(9.0) / beta
        for eps, expect_above in ((1e-9, True), (-1e-9, False)):
            delta = np.array([0.0, gap + eps])
            post = posterior_from_costs(goals, delta, prior, beta)
            assert (post.prob("g1") > 0.9) == expect_above


def test_underflow_flag_on_huge_costs():
    goals = [GoalHypothesis("g1", 100.0), GoalHypothesis("g2", 200.0)]
    post = posterior_from_costs(goals, np.array([0.0, 5.0]),
                                np.array([0.0, 0.0]), beta=1.0)
    assert post.underflow
    # degenerate prior falls back to uniform
    assert post.prob("g1") == pytest.approx(0.5)


def test_predicted_modes_follow_corridor_and_grow_sigma():
    sc = make_scenario(goals=({"s": 290.0},))
    agent = AgentState(20.0, 1.0, 0.0, 8.0)
    goals = extract_goals(sc, agent)
    post = goal_posterior(_observed([18.0, 19.0, 20.0], speed=8.0), goals, sc)
    out = predict_trajectories(post, goals, agent, sc)
    assert len(out.modes) == len(goals)
    mode = out.modes[0]
    assert len(mode.trajectory.states) == sc.horizon_steps + 1
    sig = np.asarray(mode.sigma)
    assert np.all(np.diff(sig) >= 0)
    # lateral offset decays toward the centerline
    ys = [s.y for s in mode.trajectory.states]
    assert abs(ys[-1]) <= abs(ys[0]) + 1e-9


def test_unreachable_goals_dropped_and_renormalized():
    sc = make_scenario(goals=({"s": 30.0}, {"s": 290.0}))
    early = AgentState(0.0, 0.0, 0.0, 10.0)
    goals = extract_goals(sc, early)
    post = goal_posterior(_observed([0.0, 1.0]), goals, sc)
    late = AgentState(100.0, 0.0, 0.0, 10.0)   # past the s=30 goal now
    out = predict_trajectories(post, goals, late, sc)
    ids = {m.goal_id for m in out.modes}
    assert all(g != "goal_s30" or False for g in ids)  # no stale goal mode
    assert abs(sum(p for _, p in out.probs) - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# GRIT trees


def _toy_dataset(n=400, seed=0):
    """Separable by construction: goal 'stop' iff distance_to_goal < 30
    and speed < 6, else 'through'."""
    rng = np.random.default_rng(seed)
    data = []
    for _ in range(n):
        f = [rng.uniform(0.0, 100.0), rng.uniform(-1.0, 1.0),
             rng.uniform(0.0, 15.0), rng.uniform(-3.0, 3.0)]
        goal = "stop" if (f[0] < 30.0 and f[2] < 6.0) else "through"
        data.append((f, goal))
    return data


def naive_descent(trees, features):
    """Straight-line reimplementation of inference used as the oracle."""
    scores = {}
    for gid in sorted(trees):
        node = trees[gid].root
        while node.left is not None:
            node = node.left if features[node.feature] <= node.threshold else node.right
        neg, pos = node.counts
        scores[gid] = (pos + 1.0) / (neg + pos + 2.0)
    total = sum(scores.values())
    return {g: s / total for g, s in scores.items()}


def test_train_and_infer_match_oracle():
    trees = grit_train(_toy_dataset(), depth_limit=4)
    rng = np.random.default_rng(1)
    for _ in range(200):
        f = [rng.uniform(0, 100), rng.uniform(-1, 1),
             rng.uniform(0, 15), rng.uniform(-3, 3)]
        post = grit_infer(trees, f)
        oracle = naive_descent(trees, f)
        for gid, p in post.probs:
            assert p == pytest.approx(oracle[gid], abs=1e-12)


def test_training_is_permutation_invariant():
    data = _toy_dataset()
    rng = np.random.default_rng(2)
    shuffled = list(data)
    rng.shuffle(shuffled)
    assert trees_to_json(grit_train(data)) == trees_to_json(grit_train(shuffled))


def test_held_out_accuracy():
    trees = grit_train(_toy_dataset(800, seed=3), depth_limit=4)
    test = _toy_dataset(400, seed=4)
    hits = sum(grit_infer(trees, f).argmax == g for f, g in test)
    assert hits / len(test) >= 0.9


def test_verify_accepts_a_true_region():
    trees = grit_train(_toy_dataset(800, seed=3), depth_limit=4)
    prop = TreeProperty(box=((0.0, 20.0), (-1.0, 1.0), (0.0, 4.0), (-3.0, 3.0)),
                        asserted_goal="stop")
    assert grit_verify(trees, prop) is None


def test_verify_witness_reevaluates_as_violation():
    trees = grit_train(_toy_dataset(800, seed=3), depth_limit=4)
    prop = TreeProperty(box=((0.0, 100.0), (-1.0, 1.0), (0.0, 15.0), (-3.0, 3.0)),
                        asserted_goal="stop")
    cx = grit_verify(trees, prop)
    assert isinstance(cx, Counterexample)
    post = grit_infer(trees, cx.features)
    assert post.argmax != "stop"
    for lo_hi, v in zip(prop.box, cx.features):
        assert lo_hi[0] <= v <= lo_hi[1]


def test_trees_json_round_trip():
    trees = grit_train(_toy_dataset(), depth_limit=3)
    again = trees_from_json(trees_to_json(trees))
    assert trees_to_json(again) == trees_to_json(trees)


def test_trees_json_rejects_bad_version():
    doc = json.loads(trees_to_json(grit_train(_toy_dataset(50))))
    doc["schema_version"] = 99
    with pytest.raises(ValueError):
        trees_from_json(json.dumps(doc))


def test_load_dataset_jsonl():
    text = ('{"features": [1, 0, 5, 0], "goal": "a"}\n'
            '\n{"features": [2, 0, 6, 0], "goal": "b"}\n')
    data = load_dataset(text)
    assert len(data) == 2 and data[1][1] == "b"
    with pytest.raises(ValueError):
        load_dataset('{"features": [1], "extra": 1}')


def test_agent_features_schema():
    sc = make_scenario()
    goals = extract_goals(sc, sc.ego)
    f = agent_features(sc, sc.ego, goals[0])
    assert len(f) == len(FEATURE_SCHEMA)
    assert f[0] == pytest.approx(goals[0].s)           # distance along corridor
    assert f[2] == pytest.approx(sc.ego.speed)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_grit_posterior_is_normalized(features):
    trees = grit_train(_toy_dataset(100, seed=5))
    post = grit_infer(trees, features)
    assert abs(sum(p for _, p in post.probs) - 1.0) < 1e-9
