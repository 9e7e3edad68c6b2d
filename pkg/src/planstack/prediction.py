"""Interpretable prediction of other agents.

Two routes: a Bayesian goal posterior from rational inverse planning over
analytic motion profiles, and one-vs-rest decision trees trained on labelled
features with an exact hyperbox verification procedure.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .world import AgentState, Goal, Scenario, Trajectory, ValidationError

FEATURE_SCHEMA = ("distance_to_goal", "angle_to_goal", "speed", "lateral_offset")


@dataclass(frozen=True)
class GoalHypothesis:
    id: str
    s: float                        # target arclength on the corridor
    branch: Optional[str] = None
    label: str = ""


@dataclass(frozen=True)
class PredictedMode:
    goal_id: str
    weight: float
    trajectory: Trajectory
    sigma: tuple[float, ...]        # per-step positional standard deviation


@dataclass(frozen=True)
class GoalPosterior:
    probs: tuple[tuple[str, float], ...]        # (goal id, probability)
    modes: tuple[PredictedMode, ...] = ()
    underflow: bool = False

    def __post_init__(self):
        p = [v for _, v in self.probs]
        if any(v < -1e-12 for v in p):
            raise ValidationError("probabilities must be >= 0")
        if p and abs(sum(p) - 1.0) > 1e-9:
            raise ValidationError("probabilities must sum to 1")

    def prob(self, goal_id: str) -> float:
        return dict(self.probs).get(goal_id, 0.0)

    @property
    def argmax(self) -> str:
        return max(self.probs, key=lambda kv: kv[1])[0]


def extract_goals(scenario: Scenario, agent: AgentState) -> list[GoalHypothesis]:
    """Map-derived goal hypotheses ahead of the agent, ordered by id.

    The corridor far end is always a candidate; declared scenario goals
    (including exit branches) count only while they are still ahead of the
    agent's current arclength.
    """
    s_agent, _ = scenario.corridor.to_frenet((agent.x, agent.y))
    out = []
    seen = set()
    for g in scenario.goals:
        if g.s <= s_agent + 1e-9:
            continue            # already passed; no longer reachable
        gid = g.branch if g.branch is not None else f"s{g.s:g}"
        if gid in seen:
            continue
        seen.add(gid)
        label = f"exit branch {g.branch}" if g.branch else f"corridor s={g.s:g}"
        out.append(GoalHypothesis(id=gid, s=g.s, branch=g.branch, label=label))
    if not any(g.branch is None for g in scenario.goals):
        end = scenario.corridor.length
        if end > s_agent + 1e-9:
            out.append(GoalHypothesis(id="corridor_end", s=end,
                                      label="corridor far end"))
    return sorted(out, key=lambda g: g.id)


# ---------------------------------------------------------------------------
# Analytic motion profiles and their comfort cost

def trapezoid_speeds(v0: float, v_ref: float, a_max: float, a_min: float,
                     n_steps: int, dt: float,
                     distance: Optional[float] = None) -> np.ndarray:
    """Speed profile ramping from v0 to v_ref under the accel bounds,
    optionally braking to stop at `distance` ahead."""
    v = np.empty(n_steps + 1)
    v[0] = max(0.0, v0)
    travelled = 0.0
    for k in range(n_steps):
        vk = v[k]
        target = v_ref
        if distance is not None:
            rem = max(0.0, distance - travelled)
            # comfortable stop: speed limited by v^2 <= 2 |a_min| rem
            target = min(target, math.sqrt(max(0.0, 2.0 * abs(a_min) * rem)))
        a = (target - vk) / dt
        a = max(a_min, min(a_max, a))
        v[k + 1] = max(0.0, vk + dt * a)
        travelled += dt * v[k]
    return v


def profile_cost(speeds: Sequence[float], v_ref: float, dt: float,
                 w_prog: float = 1.0, w_jerk: float = 0.5) -> float:
    """Speed-tracking plus longitudinal-jerk cost of a motion profile."""
    v = np.asarray(speeds, dtype=float)
    a = np.diff(v) / dt
    jerk = np.diff(a)
    return float(w_prog * np.sum((v - v_ref) ** 2) + w_jerk * np.sum(jerk ** 2))


def goal_cost_gaps(observed: Trajectory, goals: Sequence[GoalHypothesis],
                   scenario: Scenario) -> np.ndarray:
    """Per-goal extra cost of the observed behaviour.

    Compares the cost of the observed prefix continued optimally to each goal
    against the optimal cost from the initially observed state; rational
    agents incur near-zero extra cost for their true goal. A zero-length
    observation yields all zeros.
    """
    dt = scenario.dt
    N = scenario.horizon_steps
    cor = scenario.corridor
    bd = scenario.bounds
    G = len(goals)
    if len(observed.states) < 2:
        return np.zeros(G)

    first = observed.states[0]
    last = observed.states[-1]
    n_obs = len(observed.states) - 1
    obs_speeds = [st.speed for st in observed.states]
    s_first, _ = cor.to_frenet((first.x, first.y))
    s_last, _ = cor.to_frenet((last.x, last.y))

    delta = np.empty(G)
    for i, g in enumerate(goals):
        # optimal from the first observed state, over the full window
        opt = trapezoid_speeds(first.speed, scenario.v_ref, bd.a_max, bd.a_min,
                               N + n_obs, dt, distance=max(0.0, g.s - s_first))
        c_opt = profile_cost(opt, scenario.v_ref, dt)
        # observed prefix + optimal completion from the current state
        completion = trapezoid_speeds(last.speed, scenario.v_ref, bd.a_max,
                                      bd.a_min, N, dt,
                                      distance=max(0.0, g.s - s_last))
        c_act = profile_cost(list(obs_speeds) + list(completion[1:]),
                             scenario.v_ref, dt)
        delta[i] = max(0.0, c_act - c_opt)
    return delta


def posterior_from_costs(goals: Sequence[GoalHypothesis], delta: np.ndarray,
                         prior: np.ndarray, beta: float) -> GoalPosterior:
    """posterior ∝ prior * exp(-beta * extra_cost), normalized."""
    loglik = -beta * np.asarray(delta, dtype=float)
    shifted = loglik - loglik.max()
    post = prior * np.exp(shifted)
    total = post.sum()
    if total <= 0 or not np.isfinite(total):
        # all likelihoods underflowed: report the prior (uniform if the
        # prior itself is degenerate) with the flag raised
        p_tot = float(np.sum(prior))
        fallback = (np.asarray(prior, dtype=float) / p_tot if p_tot > 0
                    else np.full(len(goals), 1.0 / len(goals)))
        probs = tuple((g.id, float(p)) for g, p in zip(goals, fallback))
        return GoalPosterior(probs, underflow=True)
    post /= total
    return GoalPosterior(tuple((g.id, float(p)) for g, p in zip(goals, post)))


def goal_posterior(observed: Trajectory, goals: Sequence[GoalHypothesis],
                   scenario: Scenario, prior: Optional[Sequence[float]] = None,
                   beta: float = 1.0) -> GoalPosterior:
    """Bayesian inverse-planning posterior over goal hypotheses."""
    if beta <= 0:
        raise ValueError("beta > 0")
    G = len(goals)
    if G == 0:
        raise ValueError("need at least one goal hypothesis")
    if prior is None:
        prior = np.full(G, 1.0 / G)
    else:
        prior = np.asarray(prior, dtype=float)
        if abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError("prior must sum to 1")
    delta = goal_cost_gaps(observed, goals, scenario)
    return posterior_from_costs(goals, delta, prior, beta)


def predict_trajectories(posterior: GoalPosterior, goals: Sequence[GoalHypothesis],
                         agent: AgentState, scenario: Scenario,
                         horizon: Optional[int] = None,
                         sigma0: float = 0.2, sigma1: float = 0.05
                         ) -> GoalPosterior:
    """Attach one corridor-following predicted mode per goal.

    Geometry follows the centerline at the agent's lateral offset decaying to
    zero; speed follows the trapezoidal profile; positional uncertainty grows
    linearly with lookahead. Unreachable goals (already behind the agent)
    are dropped and the weights renormalized.
    """
    N = horizon if horizon is not None else scenario.horizon_steps
    dt = scenario.dt
    cor = scenario.corridor
    bd = scenario.bounds
    s0, n0 = cor.to_frenet((agent.x, agent.y))
    by_id = {g.id: g for g in goals}

    modes = []
    dropped = False
    for gid, w in posterior.probs:
        g = by_id[gid]
        if g.s <= s0 + 1e-9:
            dropped = True
            continue
        speeds = trapezoid_speeds(agent.speed, scenario.v_ref, bd.a_max,
                                  bd.a_min, N, dt, distance=g.s - s0)
        states = []
        s = s0
        for k in range(N + 1):
            lateral = n0 * max(0.0, 1.0 - k / max(1, N // 2))
            sk = min(s, cor.length)
            p = cor.from_frenet(sk, lateral)
            heading = cor.heading_at(sk)
            states.append(AgentState(float(p[0]), float(p[1]), heading,
                                     float(speeds[k])))
            if k < N:
                s += dt * speeds[k]
        controls = tuple(((speeds[k + 1] - speeds[k]) / dt, 0.0) for k in range(N))
        sigma = tuple(sigma0 + sigma1 * k * dt for k in range(N + 1))
        modes.append(PredictedMode(gid, w, Trajectory(tuple(states), controls),
                                   sigma))

    total = sum(m.weight for m in modes)
    if total <= 0:
        raise ValidationError("no reachable goal mode")
    modes = [PredictedMode(m.goal_id, m.weight / total, m.trajectory, m.sigma)
             for m in modes]
    probs = tuple((m.goal_id, m.weight) for m in modes)
    return GoalPosterior(probs, modes=tuple(modes), underflow=dropped)


# ---------------------------------------------------------------------------
# Decision-tree goal recognition

@dataclass(frozen=True)
class TreeNode:
    # internal: feature/threshold plus children; leaf: class counts
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    counts: tuple[int, int] = (0, 0)        # (negative, positive)

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class GoalTree:
    """One-vs-rest tree for a single goal id."""
    goal_id: str
    root: TreeNode
    depth_limit: int

    def score(self, features: Sequence[float]) -> float:
        """Laplace-smoothed positive proportion at the reached leaf."""
        node = self.root
        while not node.is_leaf:
            node = node.left if features[node.feature] <= node.threshold else node.right
        neg, pos = node.counts
        return (pos + 1.0) / (neg + pos + 2.0)


@dataclass(frozen=True)
class TreeProperty:
    box: tuple[tuple[float, float], ...]    # per-feature closed interval
    asserted_goal: str

    def __post_init__(self):
        if len(self.box) != len(FEATURE_SCHEMA):
            raise ValidationError(f"property box needs {len(FEATURE_SCHEMA)} intervals")
        for lo, hi in self.box:
            if lo > hi:
                raise ValidationError("empty interval in property box")


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - np.sum(p * p))


def _grow(X: np.ndarray, y: np.ndarray, depth: int, depth_limit: int,
          min_leaf: int) -> TreeNode:
    neg = int(np.sum(y == 0))
    pos = int(np.sum(y == 1))
    if depth >= depth_limit or len(y) < 2 * min_leaf or neg == 0 or pos == 0:
        return TreeNode(counts=(neg, pos))

    best = None     # (impurity, feature, threshold)
    parent_counts = np.array([neg, pos], dtype=float)
    for f in range(X.shape[1]):
        vals = np.unique(X[:, f])
        if len(vals) < 2:
            continue
        for t in (vals[:-1] + vals[1:]) / 2.0:
            mask = X[:, f] <= t
            nl = int(mask.sum())
            nr = len(y) - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            cl = np.array([np.sum(y[mask] == 0), np.sum(y[mask] == 1)], float)
            cr = parent_counts - cl
            imp = (nl * _gini(cl) + nr * _gini(cr)) / len(y)
            key = (imp, f, t)
            if best is None or key < best:
                best = key
    if best is None or best[0] >= _gini(parent_counts) - 1e-12:
        return TreeNode(counts=(neg, pos))
    _, f, t = best
    mask = X[:, f] <= t
    return TreeNode(feature=f, threshold=float(t),
                    left=_grow(X[mask], y[mask], depth + 1, depth_limit, min_leaf),
                    right=_grow(X[~mask], y[~mask], depth + 1, depth_limit, min_leaf),
                    counts=(neg, pos))


def grit_train(dataset: Sequence[tuple[Sequence[float], str]],
               depth_limit: int = 4, min_leaf: int = 1) -> dict[str, GoalTree]:
    """Train one-vs-rest trees by greedy Gini splits.

    Deterministic: thresholds at midpoints of sorted unique values, ties
    broken by lowest feature index then lowest threshold, so training is
    invariant to dataset permutation.
    """
    if not dataset:
        raise ValueError("empty dataset")
    X = np.asarray([f for f, _ in dataset], dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("features must be finite")
    labels = [g for _, g in dataset]
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("need >= 2 goal classes")
    trees = {}
    for gid in classes:
        y = np.array([1 if l == gid else 0 for l in labels])
        trees[gid] = GoalTree(gid, _grow(X, y, 0, depth_limit, min_leaf),
                              depth_limit)
    return trees


def grit_infer(trees: dict[str, GoalTree], features: Sequence[float]) -> GoalPosterior:
    """Normalize per-goal smoothed leaf scores into a posterior."""
    if len(features) != len(FEATURE_SCHEMA):
        raise ValueError(f"expected {len(FEATURE_SCHEMA)} features")
    scores = {gid: t.score(features) for gid, t in sorted(trees.items())}
    total = sum(scores.values())
    probs = tuple((gid, s / total) for gid, s in scores.items())
    return GoalPosterior(probs)


@dataclass(frozen=True)
class Counterexample:
    features: tuple[float, ...]


def grit_verify(trees: dict[str, GoalTree], prop: TreeProperty
                ) -> Optional[Counterexample]:
    """Exact check that the asserted goal is the strict posterior argmax
    everywhere in the box. Returns None when verified, else a witness.

    The posterior is piecewise constant on the grid induced by all tree
    thresholds, so checking one interior point per cell is a complete
    decision procedure.
    """
    d = len(FEATURE_SCHEMA)
    cuts: list[list[float]] = [[] for _ in range(d)]

    def collect(node: TreeNode):
        if not node.is_leaf:
            cuts[node.feature].append(node.threshold)
            collect(node.left)
            collect(node.right)

    for t in trees.values():
        collect(t.root)

    axes = []
    for f in range(d):
        lo, hi = prop.box[f]
        ts = sorted({t for t in cuts[f] if lo < t < hi})
        edges = [lo] + ts + [hi]
        # representative point inside each cell; tree split is `<= t`, so a
        # midpoint strictly between edges lands in exactly one cell
        reps = []
        for a, b in zip(edges[:-1], edges[1:]):
            reps.append((a + b) / 2.0 if b > a else a)
        if not reps:
            reps = [lo]
        axes.append(reps)

    idx = [0] * d
    while True:
        point = tuple(axes[f][idx[f]] for f in range(d))
        post = grit_infer(trees, point)
        p_assert = post.prob(prop.asserted_goal)
        for gid, p in post.probs:
            if gid != prop.asserted_goal and p >= p_assert:
                return Counterexample(point)
        f = 0
        while f < d:
            idx[f] += 1
            if idx[f] < len(axes[f]):
                break
            idx[f] = 0
            f += 1
        if f == d:
            return None


# ---------------------------------------------------------------------------
# Serialization (JSON, versioned)

TREES_SCHEMA_VERSION = 1


def _node_to_json(node: TreeNode) -> dict:
    if node.is_leaf:
        return {"counts": list(node.counts)}
    return {"feature": node.feature, "threshold": node.threshold,
            "counts": list(node.counts),
            "left": _node_to_json(node.left), "right": _node_to_json(node.right)}


def _node_from_json(obj: dict) -> TreeNode:
    if "feature" not in obj:
        return TreeNode(counts=tuple(obj["counts"]))
    return TreeNode(feature=int(obj["feature"]), threshold=float(obj["threshold"]),
                    left=_node_from_json(obj["left"]),
                    right=_node_from_json(obj["right"]),
                    counts=tuple(obj.get("counts", (0, 0))))


def trees_to_json(trees: dict[str, GoalTree]) -> str:
    doc = {"schema_version": TREES_SCHEMA_VERSION,
           "feature_schema": list(FEATURE_SCHEMA),
           "trees": {gid: {"depth_limit": t.depth_limit,
                           "root": _node_to_json(t.root)}
                     for gid, t in sorted(trees.items())}}
    return json.dumps(doc, indent=2, sort_keys=True)


def trees_from_json(text: str) -> dict[str, GoalTree]:
    doc = json.loads(text)
    if doc.get("schema_version") != TREES_SCHEMA_VERSION:
        raise ValueError(f"unsupported trees schema version {doc.get('schema_version')}")
    return {gid: GoalTree(gid, _node_from_json(spec["root"]),
                          int(spec["depth_limit"]))
            for gid, spec in doc["trees"].items()}


def load_dataset(text: str) -> list[tuple[list[float], str]]:
    """JSONL dataset: one {"features": [...], "goal": "id"} per line."""
    out = []
    for i, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if set(rec) != {"features", "goal"}:
            raise ValueError(f"line {i + 1}: expected fields features, goal")
        feats = [float(v) for v in rec["features"]]
        if len(feats) != len(FEATURE_SCHEMA):
            raise ValueError(f"line {i + 1}: expected {len(FEATURE_SCHEMA)} features")
        out.append((feats, str(rec["goal"])))
    return out


def agent_features(scenario: Scenario, agent: AgentState,
                   goal: GoalHypothesis) -> list[float]:
    """Feature vector per the fixed schema for one agent/goal pair."""
    s, n = scenario.corridor.to_frenet((agent.x, agent.y))
    dist = max(0.0, goal.s - s)
    target = scenario.corridor.from_frenet(min(goal.s, scenario.corridor.length), 0.0)
    ang = math.atan2(target[1] - agent.y, target[0] - agent.x) - agent.heading
    ang = math.atan2(math.sin(ang), math.cos(ang))
    return [dist, ang, agent.speed, n]
