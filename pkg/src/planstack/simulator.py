"""Deterministic closed-loop execution: scripted agents, optional surrogate
perception errors, prediction, planning, and ego integration, with metrics
computed from the recorded trace."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import pem as pem_mod
from . import planner as planner_mod
from . import prediction as pred_mod
from .world import (AgentState, Obstacle, Scenario, Trajectory,
                    EGO_HALF_LENGTH, EGO_HALF_WIDTH, WHEELBASE, normalize_angle)

TRACE_VERSION = 1

PERCEPTION_MODES = ("gt", "surrogate")
PREDICTION_MODES = ("inverse", "trees", "cv")


@dataclass(frozen=True)
class SimConfig:
    steps: int
    seed: int = 0
    perception: str = "gt"
    prediction: str = "cv"
    pem_params: Optional[pem_mod.PemParams] = None
    trees: Optional[dict] = None            # goal id -> GoalTree, for "trees" mode
    planner: planner_mod.PlannerConfig = planner_mod.PlannerConfig()

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps >= 1")
        if self.perception not in PERCEPTION_MODES:
            raise ValueError(f"perception must be one of {PERCEPTION_MODES}")
        if self.prediction not in PREDICTION_MODES:
            raise ValueError(f"prediction must be one of {PREDICTION_MODES}")
        if self.perception == "surrogate" and self.pem_params is None:
            raise ValueError("surrogate perception needs pem_params")
        if self.prediction == "trees" and not self.trees:
            raise ValueError("trees prediction needs trained trees")


@dataclass
class StepRecord:
    step: int
    ego: AgentState
    perceived: list[dict]                   # id, x, y of objects seen this step
    posteriors: dict[str, list]             # obstacle id -> [(goal id, prob)]
    plan_source: str
    control: tuple[float, float]            # executed (accel, steer)
    cycle_time: float                       # wall clock; excluded from JSONL


@dataclass
class SimTrace:
    scenario: Scenario
    config: SimConfig
    records: list[StepRecord]
    version: int = TRACE_VERSION


@dataclass
class Metrics:
    collision: bool
    first_collision_step: Optional[int]
    min_separation: float
    progress: float
    max_accel_jerk: float
    max_steer_jerk: float
    source_counts: dict[str, int]
    mean_cycle_time: float
    p95_cycle_time: float
    prediction_accuracy: Optional[float]


def substream(seed: int, step: int) -> np.random.Generator:
    """Per-step PRNG substream (PCG64 keyed by root seed and step)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, step])))


def bicycle_step(state: AgentState, accel: float, steer: float, dt: float,
                 wheelbase: float = WHEELBASE) -> AgentState:
    """One explicit-Euler step of the kinematic bicycle (the same update the
    refinement stage constrains)."""
    x = state.x + dt * state.speed * math.cos(state.heading)
    y = state.y + dt * state.speed * math.sin(state.heading)
    heading = state.heading + dt * state.speed * math.tan(steer) / wheelbase
    speed = max(0.0, state.speed + dt * accel)
    return AgentState(x, y, normalize_angle(heading), speed, accel, steer)


def _salient(ego: AgentState, obstacle_state: AgentState) -> pem_mod.SalientVars:
    dx = obstacle_state.x - ego.x
    dy = obstacle_state.y - ego.y
    rng = math.hypot(dx, dy)
    az = normalize_angle(math.atan2(dy, dx) - ego.heading)
    return pem_mod.SalientVars(range=rng, azimuth=az, occlusion=0.0)


def scripted_goal(scenario: Scenario, obstacle: Obstacle,
                  goals: Sequence[pred_mod.GoalHypothesis]) -> Optional[str]:
    """Ground-truth goal of a scripted agent: the hypothesis closest in
    arclength to its scripted endpoint."""
    if not goals:
        return None
    last = obstacle.trajectory[-1]
    s_end, _ = scenario.corridor.to_frenet((last.x, last.y))
    return min(goals, key=lambda g: abs(g.s - s_end)).id


def run_sim(scenario: Scenario, config: SimConfig) -> SimTrace:
    """Execute the closed loop for config.steps steps."""
    ego = scenario.ego
    dt = scenario.dt
    N = scenario.horizon_steps
    records: list[StepRecord] = []
    # perceived-state history per obstacle id, for inverse planning
    history: dict[str, list[AgentState]] = {ob.id: [] for ob in scenario.obstacles}
    prev_plan: Optional[Trajectory] = None

    for step in range(config.steps):
        gt_states = {ob.id: ob.state_at(step) for ob in scenario.obstacles}

        # --- perception
        if config.perception == "surrogate":
            gt_objects = [
                pem_mod.GtObject(id=ob.id, x=st.x, y=st.y, heading=st.heading,
                                 half_length=ob.half_length,
                                 half_width=ob.half_width,
                                 salient=_salient(ego, st))
                for ob, st in ((ob, gt_states[ob.id]) for ob in scenario.obstacles)]
            rng = substream(config.seed, step)
            perceived_objs = pem_mod.apply_pem(gt_objects, config.pem_params, rng)
            perceived: dict[str, AgentState] = {}
            true_by_id = {ob.id: gt_states[ob.id] for ob in scenario.obstacles}
            for po in perceived_objs:
                true = true_by_id[po.id]
                perceived[po.id] = AgentState(po.x, po.y, true.heading,
                                              true.speed, true.accel, true.steer)
        else:
            perceived = dict(gt_states)

        for oid, st in perceived.items():
            history[oid].append(st)

        # --- prediction
        by_id = {ob.id: ob for ob in scenario.obstacles}
        posteriors: dict[str, list] = {}
        predictions: dict[str, list[AgentState]] = {}
        snapshot_obstacles = []
        goals = pred_mod.extract_goals(scenario, ego)
        for oid, st in sorted(perceived.items()):
            ob = by_id[oid]
            if config.prediction == "cv" or not goals:
                pred_states = _constant_velocity(st, dt, N)
            else:
                agent_goals = pred_mod.extract_goals(scenario, st) or goals
                if config.prediction == "inverse":
                    obs_states = history[oid][-(N + 1):]
                    controls = tuple((0.0, 0.0) for _ in range(len(obs_states) - 1))
                    observed = Trajectory(tuple(obs_states), controls)
                    post = pred_mod.goal_posterior(observed, agent_goals, scenario)
                else:
                    feats = pred_mod.agent_features(scenario, st, agent_goals[0])
                    post = pred_mod.grit_infer(config.trees, feats)
                    known = {g.id for g in agent_goals}
                    kept = [(g, p) for g, p in post.probs if g in known]
                    if kept:
                        tot = sum(p for _, p in kept)
                        post = pred_mod.GoalPosterior(
                            tuple((g, p / tot) for g, p in kept))
                    else:
                        post = pred_mod.GoalPosterior(
                            tuple((g.id, 1.0 / len(agent_goals))
                                  for g in agent_goals))
                posteriors[oid] = [list(kv) for kv in post.probs]
                try:
                    with_modes = pred_mod.predict_trajectories(
                        post, agent_goals, st, scenario, horizon=N)
                    top = max(with_modes.modes, key=lambda m: m.weight)
                    pred_states = list(top.trajectory.states)
                except (pred_mod.ValidationError, KeyError):
                    pred_states = _constant_velocity(st, dt, N)
            predictions[oid] = pred_states
            snapshot_obstacles.append(
                Obstacle(oid, ob.half_length, ob.half_width, tuple(pred_states)))

        # --- plan
        snapshot = Scenario(
            corridor=scenario.corridor, ego=ego,
            obstacles=tuple(snapshot_obstacles), goals=scenario.goals,
            dt=dt, horizon_steps=N, v_ref=scenario.v_ref, bounds=scenario.bounds)
        result = planner_mod.plan_cycle(snapshot, predictions, config.planner)
        if result.source == "EmergencyBrake" and prev_plan is not None:
            # Mid-manoeuvre the linearized stage can lose feasibility even
            # though the previous refined plan, shifted one step, is still a
            # valid seed. Retry before committing to a full brake.
            retry = planner_mod.plan_cycle(
                snapshot, predictions, config.planner,
                external_seed=_shift_plan(prev_plan))
            if retry.source == "NlpConverged":
                result = retry
        prev_plan = result.trajectory if result.source != "EmergencyBrake" else None

        # --- act: first planned control
        accel = result.trajectory.controls[0][0]
        steer = result.trajectory.states[0].steer
        steer = max(-scenario.bounds.steer_max,
                    min(scenario.bounds.steer_max, steer))

        records.append(StepRecord(
            step=step, ego=ego,
            perceived=[{"id": oid, "x": st.x, "y": st.y}
                       for oid, st in sorted(perceived.items())],
            posteriors=posteriors, plan_source=result.source,
            control=(float(accel), float(steer)),
            cycle_time=result.cycle_time))

        ego = bicycle_step(ego, accel, steer, dt)

    return SimTrace(scenario=scenario, config=config, records=records)


def _shift_plan(plan: Trajectory) -> Trajectory:
    """Advance a plan by one step, holding the final state and control."""
    states = plan.states[1:] + (plan.states[-1],)
    controls = plan.controls[1:] + (plan.controls[-1],)
    return Trajectory(states, controls, frame=plan.frame)


def _constant_velocity(st: AgentState, dt: float, n_steps: int) -> list[AgentState]:
    out = [st]
    cur = st
    for _ in range(n_steps):
        cur = AgentState(cur.x + dt * cur.speed * math.cos(cur.heading),
                         cur.y + dt * cur.speed * math.sin(cur.heading),
                         cur.heading, cur.speed, cur.accel, cur.steer)
        out.append(cur)
    return out


# ---------------------------------------------------------------------------
# Collision geometry: oriented rectangles

def _rect_corners(cx: float, cy: float, heading: float,
                  hl: float, hw: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    R = np.array([[c, -s], [s, c]])
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    return local @ R.T + np.array([cx, cy])


def rects_intersect(a: np.ndarray, b: np.ndarray) -> bool:
    """Separating-axis test for two convex quads (corner arrays, (4, 2))."""
    for rect in (a, b):
        for i in range(4):
            edge = rect[(i + 1) % 4] - rect[i]
            axis = np.array([-edge[1], edge[0]])
            pa = a @ axis
            pb = b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def rect_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Exact distance between two convex quads; 0 when intersecting."""
    if rects_intersect(a, b):
        return 0.0
    best = math.inf
    for p_rect, q_rect in ((a, b), (b, a)):
        for p in p_rect:
            for i in range(4):
                q0 = q_rect[i]
                q1 = q_rect[(i + 1) % 4]
                d = q1 - q0
                t = float(np.clip(np.dot(p - q0, d) / np.dot(d, d), 0.0, 1.0))
                proj = q0 + t * d
                best = min(best, float(np.hypot(*(p - proj))))
    return best


def evaluate(trace: SimTrace) -> Metrics:
    """Metrics as a pure function of the trace."""
    if not trace.records:
        raise ValueError("non-empty trace required")
    sc = trace.scenario
    collision = False
    first_collision = None
    min_sep = math.inf
    for rec in trace.records:
        ego_rect = _rect_corners(rec.ego.x, rec.ego.y, rec.ego.heading,
                                 EGO_HALF_LENGTH, EGO_HALF_WIDTH)
        for ob in sc.obstacles:
            st = ob.state_at(rec.step)
            rect = _rect_corners(st.x, st.y, st.heading,
                                 ob.half_length, ob.half_width)
            if rects_intersect(ego_rect, rect):
                if not collision:
                    collision = True
                    first_collision = rec.step
                sep = 0.0
            else:
                sep = rect_distance(ego_rect, rect)
            min_sep = min(min_sep, sep)
    if not sc.obstacles:
        min_sep = math.inf

    s0, _ = sc.corridor.to_frenet((trace.records[0].ego.x, trace.records[0].ego.y))
    s1, _ = sc.corridor.to_frenet((trace.records[-1].ego.x, trace.records[-1].ego.y))
    progress = max(0.0, s1 - s0)

    accels = [r.control[0] for r in trace.records]
    steers = [r.control[1] for r in trace.records]
    dt = sc.dt
    max_aj = max((abs(a1 - a0) / dt for a0, a1 in zip(accels, accels[1:])),
                 default=0.0)
    max_sj = max((abs(s1_ - s0_) / dt for s0_, s1_ in zip(steers, steers[1:])),
                 default=0.0)

    counts: dict[str, int] = {}
    for r in trace.records:
        counts[r.plan_source] = counts.get(r.plan_source, 0) + 1
    times = sorted(r.cycle_time for r in trace.records)
    mean_t = sum(times) / len(times)
    p95 = times[min(len(times) - 1, math.ceil(0.95 * len(times)) - 1)]

    goals = pred_mod.extract_goals(sc, sc.ego)
    truth = {ob.id: scripted_goal(sc, ob, goals) for ob in sc.obstacles}
    hits = total = 0
    for rec in trace.records:
        for oid, probs in rec.posteriors.items():
            if truth.get(oid) is None or not probs:
                continue
            top = max(probs, key=lambda kv: kv[1])[0]
            total += 1
            hits += int(top == truth[oid])
    accuracy = (hits / total) if total else None

    return Metrics(collision=collision, first_collision_step=first_collision,
                   min_separation=min_sep, progress=progress,
                   max_accel_jerk=max_aj, max_steer_jerk=max_sj,
                   source_counts=counts, mean_cycle_time=mean_t,
                   p95_cycle_time=p95, prediction_accuracy=accuracy)


def first_detection_step(trace: SimTrace, obstacle_id: str) -> Optional[int]:
    """First step at which the given obstacle appears in perception."""
    for rec in trace.records:
        if any(p["id"] == obstacle_id for p in rec.perceived):
            return rec.step
    return None


# ---------------------------------------------------------------------------
# Serialization

def trace_to_jsonl(trace: SimTrace, include_timing: bool = False) -> str:
    """One JSON object per step; wall-clock timings are excluded by default
    so identical runs serialize identically."""
    lines = []
    header = {"version": trace.version,
              "config": {"steps": trace.config.steps, "seed": trace.config.seed,
                         "perception": trace.config.perception,
                         "prediction": trace.config.prediction}}
    lines.append(json.dumps(header, sort_keys=True))
    for rec in trace.records:
        obj = {"step": rec.step,
               "ego": {"x": rec.ego.x, "y": rec.ego.y,
                       "heading": rec.ego.heading, "speed": rec.ego.speed},
               "perceived": rec.perceived,
               "posteriors": rec.posteriors,
               "plan_source": rec.plan_source,
               "control": list(rec.control)}
        if include_timing:
            obj["cycle_time"] = rec.cycle_time
        lines.append(json.dumps(obj, sort_keys=True))
    return "\n".join(lines) + "\n"


METRICS_CSV_HEADER = ("scenario,collision,first_collision_step,min_separation,"
                      "progress,max_accel_jerk,max_steer_jerk,n_nlp_converged,"
                      "n_milp_fallback,n_emergency_brake,prediction_accuracy")

TIMING_CSV_SUFFIX = ",mean_cycle_time,p95_cycle_time"


def metrics_csv_row(name: str, m: Metrics, include_timing: bool = False) -> str:
    sep = "inf" if math.isinf(m.min_separation) else f"{m.min_separation:.6f}"
    acc = "" if m.prediction_accuracy is None else f"{m.prediction_accuracy:.6f}"
    first = "" if m.first_collision_step is None else str(m.first_collision_step)
    row = (f"{name},{int(m.collision)},{first},{sep},{m.progress:.6f},"
           f"{m.max_accel_jerk:.6f},{m.max_steer_jerk:.6f},"
           f"{m.source_counts.get('NlpConverged', 0)},"
           f"{m.source_counts.get('MilpSeedFallback', 0)},"
           f"{m.source_counts.get('EmergencyBrake', 0)},{acc}")
    if include_timing:
        row += f",{m.mean_cycle_time:.6f},{m.p95_cycle_time:.6f}"
    return row


# ---------------------------------------------------------------------------
# SVG overhead plot

def trace_to_svg(trace: SimTrace, width: int = 800, height: int = 400) -> str:
    """Overhead plot: corridor edges, ego path, obstacle paths."""
    sc = trace.scenario
    cor = sc.corridor
    half = cor.width / 2.0
    edges = []
    for sgn in (1.0, -1.0):
        pts = []
        for s in np.linspace(0.0, cor.length, 200):
            p = cor.from_frenet(float(s), sgn * half)
            pts.append((p[0], p[1]))
        edges.append(pts)
    ego_path = [(r.ego.x, r.ego.y) for r in trace.records]
    ob_paths = {ob.id: [(ob.state_at(r.step).x, ob.state_at(r.step).y)
                        for r in trace.records]
                for ob in sc.obstacles}

    all_pts = [p for e in edges for p in e] + ego_path \
        + [p for pts in ob_paths.values() for p in pts]
    xs = [p[0] for p in all_pts]
    ys = [p[1] for p in all_pts]
    x0, x1 = min(xs) - 2, max(xs) + 2
    y0, y1 = min(ys) - 2, max(ys) + 2
    sx = width / (x1 - x0)
    sy = height / (y1 - y0)
    s = min(sx, sy)

    def T(p):
        return (p[0] - x0) * s, height - (p[1] - y0) * s

    def poly(pts, color, w, dash=""):
        d = " ".join(f"{T(p)[0]:.2f},{T(p)[1]:.2f}" for p in pts)
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (f'<polyline points="{d}" fill="none" stroke="{color}" '
                f'stroke-width="{w}"{extra}/>')

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             '<rect width="100%" height="100%" fill="white"/>']
    for e in edges:
        parts.append(poly(e, "#888888", 1.5, dash="6,4"))
    for oid in sorted(ob_paths):
        parts.append(poly(ob_paths[oid], "#cc3333", 2))
    parts.append(poly(ego_path, "#2255cc", 2.5))
    parts.append("</svg>")
    return "\n".join(parts)
