"""One receding-horizon planning cycle: mixed-integer seed, nonlinear
refinement, and explicit fallbacks so a plan is always produced."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional, Sequence

from . import milp, nlp, rules
from .world import AgentState, Scenario, Trajectory


@dataclass(frozen=True)
class PlannerConfig:
    milp_weights: milp.MilpWeights = milp.MilpWeights()
    nlp_weights: nlp.NlpWeights = nlp.NlpWeights()
    nlp_budget: nlp.NlpBudget = nlp.NlpBudget()
    gap_tol: float = 1e-4
    node_limit: int = 10_000
    rule_constraints: tuple[rules.Formula, ...] = ()
    cycle_time_budget: float = 0.1      # seconds; advisory, recorded not enforced


@dataclass
class PlanResult:
    trajectory: Trajectory
    source: str                         # NlpConverged | MilpSeedFallback | EmergencyBrake
    milp_summary: Optional[dict] = None
    nlp_summary: Optional[dict] = None
    cycle_time: float = 0.0

    def __post_init__(self):
        if self.source not in ("NlpConverged", "MilpSeedFallback", "EmergencyBrake"):
            raise ValueError(f"unknown plan source {self.source!r}")


def emergency_brake(scenario: Scenario) -> Trajectory:
    """Maximum-deceleration straight-corridor stop from the current state."""
    N = scenario.horizon_steps
    dt = scenario.dt
    cor = scenario.corridor
    a_min = scenario.bounds.a_min
    s, n = cor.to_frenet((scenario.ego.x, scenario.ego.y))
    v = scenario.ego.speed
    states = []
    controls = []
    for k in range(N + 1):
        sk = min(s, cor.length)
        p = cor.from_frenet(sk, n)
        heading = cor.heading_at(sk)
        accel = a_min if v > 0 else 0.0
        states.append(AgentState(float(p[0]), float(p[1]), heading, v, accel, 0.0))
        if k < N:
            controls.append((accel, 0.0))
            s += dt * v
            v = max(0.0, v + dt * a_min)
    return Trajectory(tuple(states), tuple(controls), frame="cartesian")


def plan_cycle(snapshot: Scenario,
               predictions: Optional[dict[str, Sequence[AgentState]]] = None,
               config: PlannerConfig = PlannerConfig(),
               external_seed: Optional[Trajectory] = None) -> PlanResult:
    """Run one planning cycle; solver failures degrade to fallbacks.

    With an external seed the mixed-integer stage is skipped entirely.
    """
    t0 = time.perf_counter()
    milp_summary = None
    seed = external_seed
    if seed is None:
        try:
            problem = milp.build_milp(snapshot, predictions,
                                      config.milp_weights,
                                      config.rule_constraints or None)
            outcome = milp.solve_milp(problem, config.gap_tol, config.node_limit)
            milp_summary = {"status": outcome.status,
                            "objective": outcome.objective,
                            "gap": outcome.gap,
                            "nodes": outcome.node_count,
                            "solve_time": outcome.solve_time}
            if outcome.x is not None:
                seed = milp.extract_seed(outcome, snapshot)
        except (ValueError, rules.EncodingError) as e:
            milp_summary = {"status": "BuildError", "error": str(e)}

    if seed is None:
        return PlanResult(emergency_brake(snapshot), "EmergencyBrake",
                          milp_summary=milp_summary,
                          cycle_time=time.perf_counter() - t0)

    nlp_summary = None
    try:
        nprob = nlp.build_nlp(snapshot, predictions, config.nlp_weights)
        nout = nlp.solve_nlp(nprob, seed, config.nlp_budget)
        nlp_summary = {"status": nout.status, "objective": nout.objective,
                       "max_violation": nout.max_violation,
                       "kkt_residual": nout.kkt_residual,
                       "inner_iterations": nout.inner_iterations,
                       "solve_time": nout.solve_time}
        if nout.status == "Converged":
            return PlanResult(nlp.outcome_trajectory(nprob, nout), "NlpConverged",
                              milp_summary=milp_summary, nlp_summary=nlp_summary,
                              cycle_time=time.perf_counter() - t0)
    except ValueError as e:
        nlp_summary = {"status": "BuildError", "error": str(e)}

    return PlanResult(seed, "MilpSeedFallback",
                      milp_summary=milp_summary, nlp_summary=nlp_summary,
                      cycle_time=time.perf_counter() - t0)
