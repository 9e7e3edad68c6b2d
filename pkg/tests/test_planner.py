"""Planning cycle orchestration and fallback ladder."""


import pytest

from planstack import nlp, planner, rules
from planstack.planner import PlannerConfig, PlanResult, emergency_brake, plan_cycle
from planstack.world import AgentState, Trajectory

from conftest import make_scenario


def test_nominal_cycle_converges(straight_scenario):
    res = plan_cycle(straight_scenario)
    assert res.source == "NlpConverged"
    assert res.milp_summary["status"] == "Optimal"
    assert res.nlp_summary["status"] == "Converged"
    assert res.cycle_time > 0.0
    assert len(res.trajectory.states) == straight_scenario.horizon_steps + 1


def test_external_seed_skips_milp(straight_scenario):
    sc = straight_scenario
    states = tuple(AgentState(k * sc.dt * 10.0, 0.0, 0.0, 10.0)
                   for k in range(sc.horizon_steps + 1))
    seed = Trajectory(states, ((0.0, 0.0),) * sc.horizon_steps)
    res = plan_cycle(sc, external_seed=seed)
    assert res.milp_summary is None
    assert res.source == "NlpConverged"


def test_zero_budget_falls_back_to_seed(straight_scenario):
    cfg = PlannerConfig(nlp_budget=nlp.NlpBudget(max_outer=0))
    res = plan_cycle(straight_scenario, config=cfg)
    assert res.source == "MilpSeedFallback"
    assert res.nlp_summary["status"] in ("MaxIter", "Diverged")


def test_blocked_corridor_emergency_brakes():
    obs = [
        {"id": f"w{i}", "half_length": 2.0, "half_width": 2.6,
         "trajectory": [{"x": 12.0, "y": y, "heading": 0.0, "speed": 0.0}]}
        for i, y in enumerate((-3.0, 0.0, 3.0))
    ]
    sc = make_scenario(obstacles=obs, ego=(0.0, 0.0, 0.0, 14.0), a_min=-1.0)
    res = plan_cycle(sc)
    assert res.source == "EmergencyBrake"
    assert res.milp_summary["status"] == "Infeasible"


def test_emergency_brake_profile():
    sc = make_scenario(ego=(10.0, 0.5, 0.0, 8.0), a_min=-4.0)
    tr = emergency_brake(sc)
    assert len(tr.states) == sc.horizon_steps + 1
    v = [s.speed for s in tr.states]
    assert v[0] == 8.0
    for k in range(sc.horizon_steps):
        assert v[k + 1] == pytest.approx(max(0.0, v[k] + sc.dt * -4.0))
    # stays in lane at the current lateral offset
    assert all(s.y == pytest.approx(0.5) for s in tr.states)


def test_emergency_brake_reaches_zero():
    sc = make_scenario(ego=(0.0, 0.0, 0.0, 5.0), a_min=-5.0, horizon_steps=20)
    tr = emergency_brake(sc)
    assert tr.states[-1].speed == 0.0


def test_rule_constraints_shape_the_plan(straight_scenario):
    # braking from 10 to 8 needs at least 4 steps at a_min=-5, dt=0.1;
    # rules live in the linear stage, so inspect the seed trajectory itself
    cfg = PlannerConfig(rule_constraints=(rules.parse_rule("G[5,15](vs <= 8)"),),
                        nlp_budget=nlp.NlpBudget(max_outer=0))
    res = plan_cycle(straight_scenario, config=cfg)
    assert res.source == "MilpSeedFallback"
    assert res.milp_summary["objective"] > 1.0    # the cap costs progress
    speeds = [s.speed for s in res.trajectory.states[5:16]]
    assert max(speeds) <= 8.0 + 1e-6


def test_unknown_source_rejected():
    sc = make_scenario()
    tr = emergency_brake(sc)
    with pytest.raises(ValueError):
        PlanResult(tr, "Telepathy")


def test_determinism(straight_scenario):
    a = plan_cycle(straight_scenario)
    b = plan_cycle(straight_scenario)
    assert [ (s.x, s.y, s.speed) for s in a.trajectory.states ] == \
           [ (s.x, s.y, s.speed) for s in b.trajectory.states ]
