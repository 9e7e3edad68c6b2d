"""Linearized mixed-integer stage: Frenet double-integrator planning MILP,
LP relaxation engine, and a best-first branch-and-bound solver.

The MILP stage seeds the nonlinear stage: per-axis double-integrator dynamics
in the curvilinear frame, L1 comfort objective via auxiliary variables, and
obstacle avoidance as 4-side big-M disjunctions.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linprog

from .world import (AgentState, Scenario, Trajectory,
                    EGO_HALF_LENGTH, EGO_HALF_WIDTH, WHEELBASE)
from . import rules as rules_mod

OBSTACLE_MARGIN = 0.5


@dataclass
class LinearProgram:
    """min c'x  s.t.  A x (<=|=|>=) b,  lb <= x <= ub."""
    c: np.ndarray
    A: np.ndarray
    relations: list[str]
    b: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float)
        self.A = np.asarray(self.A, dtype=float).reshape(len(self.b), len(self.c))
        self.b = np.asarray(self.b, dtype=float)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)
        m, n = self.A.shape
        if not (len(self.c) == n == len(self.lb) == len(self.ub)
                and len(self.relations) == m == len(self.b)):
            raise ValueError("inconsistent LP dimensions")
        if np.any(self.lb > self.ub):
            raise ValueError("need lb <= ub")


@dataclass
class LpOutcome:
    status: str                      # Optimal | Infeasible | Unbounded | NumericalFailure
    x: Optional[np.ndarray] = None
    objective: float = math.nan


def solve_lp(lp: LinearProgram) -> LpOutcome:
    """Solve the continuous relaxation.

    Backed by scipy's HiGHS dual simplex; statuses are mapped onto the
    four-way outcome used by branch and bound.
    """
    is_eq = np.array([r == "=" for r in lp.relations])
    sign = np.array([-1.0 if r == ">=" else 1.0 for r in lp.relations])
    ub_mask = ~is_eq
    A_ub = lp.A[ub_mask] * sign[ub_mask, None]
    b_ub = lp.b[ub_mask] * sign[ub_mask]
    A_eq = lp.A[is_eq]
    b_eq = lp.b[is_eq]
    res = linprog(
        lp.c,
        A_ub=A_ub if A_ub.size else None, b_ub=b_ub if A_ub.size else None,
        A_eq=A_eq if A_eq.size else None, b_eq=b_eq if A_eq.size else None,
        bounds=np.column_stack([lp.lb, lp.ub]), method="highs")
    if res.status == 0:
        return LpOutcome("Optimal", np.asarray(res.x), float(res.fun))
    if res.status == 2:
        return LpOutcome("Infeasible")
    if res.status == 3:
        return LpOutcome("Unbounded")
    return LpOutcome("NumericalFailure")


@dataclass
class MilpProblem:
    lp: LinearProgram
    binary_mask: np.ndarray           # bool per column
    names: dict[str, int]             # semantic label -> column

    def __post_init__(self):
        self.binary_mask = np.asarray(self.binary_mask, dtype=bool)
        if self.binary_mask.shape != self.lp.c.shape:
            raise ValueError("binary mask length mismatch")
        if np.any(self.lp.lb[self.binary_mask] < 0) or np.any(self.lp.ub[self.binary_mask] > 1):
            raise ValueError("binary variables need bounds within [0, 1]")
        cols = list(self.names.values())
        if len(set(cols)) != len(cols):
            raise ValueError("duplicate column in name map")

    @property
    def n_binaries(self) -> int:
        return int(self.binary_mask.sum())


@dataclass
class MilpOutcome:
    status: str                       # Optimal | Infeasible | NodeLimit
    x: Optional[np.ndarray]
    objective: float
    best_bound: float
    gap: float
    node_count: int
    solve_time: float


def solve_milp(problem: MilpProblem, gap_tol: float = 1e-4,
               node_limit: int = 10_000) -> MilpOutcome:
    """Best-first branch and bound over the binary variables.

    Branches on the most fractional binary (ties: lowest column index);
    nodes ordered by relaxation bound, ties FIFO.
    """
    t0 = time.perf_counter()
    bin_cols = np.flatnonzero(problem.binary_mask)
    lp0 = problem.lp

    incumbent: Optional[np.ndarray] = None
    incumbent_obj = math.inf
    best_bound = -math.inf
    nodes = 0
    counter = 0
    # heap entries: (bound, insertion order, lb, ub)
    root = solve_lp(lp0)
    heap: list = []
    if root.status == "Optimal":
        heap.append((root.objective, 0, lp0.lb.copy(), lp0.ub.copy(), root))
        counter = 1
    elif root.status in ("Infeasible", "NumericalFailure"):
        return MilpOutcome("Infeasible", None, math.nan, math.nan, math.nan, 1,
                           time.perf_counter() - t0)
    else:   # Unbounded relaxation: binaries are bounded, treat as failure
        return MilpOutcome("Infeasible", None, math.nan, math.nan, math.nan, 1,
                           time.perf_counter() - t0)

    def fractionality(x: np.ndarray) -> np.ndarray:
        v = x[bin_cols]
        return np.abs(v - np.round(v))

    while heap:
        bound, _, lb, ub, rel = heapq.heappop(heap)
        nodes += 1
        if bound >= incumbent_obj - gap_tol * max(1.0, abs(incumbent_obj)):
            continue        # cannot improve
        frac = fractionality(rel.x)
        if frac.size == 0 or frac.max() <= 1e-6:
            x = rel.x.copy()
            x[bin_cols] = np.round(x[bin_cols])
            if rel.objective < incumbent_obj:
                incumbent, incumbent_obj = x, rel.objective
            continue
        if nodes >= node_limit:
            best_bound = min([bound] + [h[0] for h in heap]) if heap else bound
            gap = ((incumbent_obj - best_bound) / max(1.0, abs(incumbent_obj))
                   if incumbent is not None else math.nan)
            return MilpOutcome("NodeLimit", incumbent, incumbent_obj, best_bound,
                               gap, nodes, time.perf_counter() - t0)
        j = bin_cols[int(np.argmax(frac))]
        for fixed in (0.0, 1.0):
            lb2, ub2 = lb.copy(), ub.copy()
            lb2[j] = ub2[j] = fixed
            child = solve_lp(replace(lp0, lb=lb2, ub=ub2))
            if child.status != "Optimal":
                continue
            if child.objective < incumbent_obj - 1e-12:
                heapq.heappush(heap, (child.objective, counter, lb2, ub2, child))
                counter += 1

    if incumbent is None:
        return MilpOutcome("Infeasible", None, math.nan, math.nan, math.nan,
                           max(nodes, 1), time.perf_counter() - t0)
    best_bound = incumbent_obj if not heap else min(incumbent_obj, min(h[0] for h in heap))
    gap = (incumbent_obj - best_bound) / max(1.0, abs(incumbent_obj))
    return MilpOutcome("Optimal", incumbent, incumbent_obj, best_bound, gap,
                       max(nodes, 1), time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Planning MILP construction

@dataclass(frozen=True)
class MilpWeights:
    w_v: float = 1.0        # |vs - v_ref|
    w_a: float = 0.5        # |as|, |an|
    w_j: float = 0.5        # accel jumps, both axes
    w_n: float = 1.0        # |n|


class _Builder:
    """Accumulates rows against a fixed column layout."""

    def __init__(self):
        self.names: dict[str, int] = {}
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.cost: list[float] = []
        self.binary: list[bool] = []
        self.rows: list[tuple[dict[int, float], str, float]] = []

    def var(self, name: str, lo: float, hi: float, cost: float = 0.0,
            binary: bool = False) -> int:
        j = len(self.lb)
        self.names[name] = j
        self.lb.append(lo)
        self.ub.append(hi)
        self.cost.append(cost)
        self.binary.append(binary)
        return j

    def row(self, coeffs: dict[int, float], rel: str, rhs: float):
        self.rows.append((coeffs, rel, rhs))

    def abs_term(self, name: str, coeffs: dict[int, float], const: float,
                 weight: float, bound: float):
        """Add u >= +-(expr + const) with cost weight*u."""
        u = self.var(name, 0.0, bound, cost=weight)
        self.row({**coeffs, u: -1.0}, "<=", -const)
        self.row({k: -v for k, v in coeffs.items()} | {u: -1.0}, "<=", const)

    def build(self) -> MilpProblem:
        n = len(self.lb)
        m = len(self.rows)
        A = np.zeros((m, n))
        b = np.zeros(m)
        rel = []
        for i, (coeffs, r, rhs) in enumerate(self.rows):
            for j, v in coeffs.items():
                A[i, j] = v
            rel.append(r)
            b[i] = rhs
        lp = LinearProgram(np.array(self.cost), A, rel, b,
                           np.array(self.lb), np.array(self.ub))
        return MilpProblem(lp, np.array(self.binary), dict(self.names))


def obstacle_frenet_box(scenario: Scenario, obstacle, k: int) -> tuple[float, float, float, float]:
    """Inflated axis-aligned Frenet box (s_min, s_max, n_min, n_max) of an
    obstacle at step k, grown by the ego footprint plus margin."""
    st = obstacle.state_at(k)
    s, n = scenario.corridor.to_frenet((st.x, st.y))
    ds = obstacle.half_length + EGO_HALF_LENGTH + OBSTACLE_MARGIN
    dn = obstacle.half_width + EGO_HALF_WIDTH + OBSTACLE_MARGIN
    return s - ds, s + ds, n - dn, n + dn


def build_milp(scenario: Scenario,
               predictions: Optional[dict[str, Sequence[AgentState]]] = None,
               weights: MilpWeights = MilpWeights(),
               rule_constraints: Optional[Sequence[rules_mod.Formula]] = None
               ) -> MilpProblem:
    """Build the linearized planning problem.

    Variables: per-axis double-integrator states s_k, n_k, vs_k, vn_k for
    k=0..N and accelerations as_k, an_k for k=0..N-1; L1 auxiliaries; binary
    obstacle-side and rule-satisfaction variables.

    predictions optionally overrides the scripted obstacle trajectories
    (map obstacle id -> per-step states for k=0..N).
    """
    N = scenario.horizon_steps
    dt = scenario.dt
    bd = scenario.bounds
    cor = scenario.corridor
    L = cor.length
    half_w = cor.width / 2.0
    n_lim = half_w - EGO_HALF_WIDTH
    if n_lim <= 0:
        raise ValueError("corridor narrower than ego")
    B = _Builder()

    s_hi_total = L + bd.v_max * dt * N
    # initial curvilinear state, needed for per-step reachability bounds
    s0, n0 = cor.to_frenet((scenario.ego.x, scenario.ego.y))
    s = [B.var(f"s_{k}", s0, min(s_hi_total, s0 + k * dt * bd.v_max))
         for k in range(N + 1)]
    n = [B.var(f"n_{k}", -n_lim, n_lim) for k in range(N + 1)]
    vs = [B.var(f"vs_{k}", 0.0, bd.v_max) for k in range(N + 1)]
    vn = [B.var(f"vn_{k}", -bd.v_max, bd.v_max) for k in range(N + 1)]
    a_s = [B.var(f"as_{k}", bd.a_min, bd.a_max) for k in range(N)]
    a_n = [B.var(f"an_{k}", bd.a_min, bd.a_max) for k in range(N)]

    # initial state pin in the curvilinear frame
    psi = scenario.ego.heading - cor.heading_at(s0)
    vs0 = max(0.0, scenario.ego.speed * math.cos(psi))
    vn0 = scenario.ego.speed * math.sin(psi)
    B.row({s[0]: 1.0}, "=", s0)
    B.row({n[0]: 1.0}, "=", max(-n_lim, min(n_lim, n0)))
    B.row({vs[0]: 1.0}, "=", min(bd.v_max, vs0))
    B.row({vn[0]: 1.0}, "=", max(-bd.v_max, min(bd.v_max, vn0)))

    # double-integrator dynamics per axis
    for k in range(N):
        B.row({s[k + 1]: 1.0, s[k]: -1.0, vs[k]: -dt}, "=", 0.0)
        B.row({vs[k + 1]: 1.0, vs[k]: -1.0, a_s[k]: -dt}, "=", 0.0)
        B.row({n[k + 1]: 1.0, n[k]: -1.0, vn[k]: -dt}, "=", 0.0)
        B.row({vn[k + 1]: 1.0, vn[k]: -1.0, a_n[k]: -dt}, "=", 0.0)

    # L1 objective via auxiliaries
    a_rng = bd.a_max - bd.a_min
    for k in range(N + 1):
        B.abs_term(f"abs_dv_{k}", {vs[k]: 1.0}, -scenario.v_ref, weights.w_v,
                   bd.v_max + scenario.v_ref)
        B.abs_term(f"abs_n_{k}", {n[k]: 1.0}, 0.0, weights.w_n, n_lim)
    for k in range(N):
        B.abs_term(f"abs_as_{k}", {a_s[k]: 1.0}, 0.0, weights.w_a, a_rng)
        B.abs_term(f"abs_an_{k}", {a_n[k]: 1.0}, 0.0, weights.w_a, a_rng)
        if k > 0:
            B.abs_term(f"abs_js_{k}", {a_s[k]: 1.0, a_s[k - 1]: -1.0}, 0.0,
                       weights.w_j, 2 * a_rng)
            B.abs_term(f"abs_jn_{k}", {a_n[k]: 1.0, a_n[k - 1]: -1.0}, 0.0,
                       weights.w_j, 2 * a_rng)

    # obstacle avoidance: 4-side disjunction per obstacle per step 1..N
    for ob in scenario.obstacles:
        prev_zs = None
        box_static = True
        prev_box = None
        pred = predictions.get(ob.id) if predictions else None
        if pred is not None and len(pred) < N + 1:
            raise ValueError(f"prediction horizon for obstacle {ob.id!r} "
                             f"is {len(pred) - 1}, need {N}")
        for k in range(1, N + 1):
            if pred is not None:
                st = pred[k]
                sp, np_ = cor.to_frenet((st.x, st.y))
                ds = ob.half_length + EGO_HALF_LENGTH + OBSTACLE_MARGIN
                dn = ob.half_width + EGO_HALF_WIDTH + OBSTACLE_MARGIN
                box = (sp - ds, sp + ds, np_ - dn, np_ + dn)
            else:
                box = obstacle_frenet_box(scenario, ob, k)
            s_min, s_max, n_min, n_max = box
            s_lo_k = B.lb[s[k]]
            s_hi_k = B.ub[s[k]]
            # presolve each disjunct against the step-k reachable set:
            # sides implied by it are fixed to 1, impossible sides to 0 (the
            # variables stay binary); big-M per constraint comes from the
            # bounded variable's range, so it is as tight as the bounds allow
            sides = [
                # (name, possible, forced, big-M row writer)
                ("behind", s_lo_k <= s_min, s_hi_k <= s_min,
                 lambda z, M: B.row({s[k]: 1.0, z: M}, "<=", s_min + M)),
                ("ahead", s_hi_k >= s_max, s_lo_k >= s_max,
                 lambda z, M: B.row({s[k]: 1.0, z: -M}, ">=", s_max - M)),
                ("left", n_lim >= n_max, -n_lim >= n_max,
                 lambda z, M: B.row({n[k]: 1.0, z: -M}, ">=", n_max - M)),
                ("right", -n_lim <= n_min, n_lim <= n_min,
                 lambda z, M: B.row({n[k]: 1.0, z: M}, "<=", n_min + M)),
            ]
            margins = (max(0.0, s_hi_k - s_min), max(0.0, s_max - s_lo_k),
                       max(0.0, n_max + n_lim), max(0.0, n_lim - n_min))
            zs = []
            for (name, possible, forced, writer), M0 in zip(sides, margins):
                if forced:
                    z = B.var(f"b_{ob.id}_{k}_{name}", 1.0, 1.0, binary=True)
                elif not possible:
                    z = B.var(f"b_{ob.id}_{k}_{name}", 0.0, 0.0, binary=True)
                else:
                    z = B.var(f"b_{ob.id}_{k}_{name}", 0.0, 1.0, binary=True)
                    writer(z, M0 + 1.0)
                zs.append(z)
            B.row({z: 1.0 for z in zs}, ">=", 1.0)
            # valid cuts for a time-invariant box: s_k is nondecreasing, so
            # "ahead" persists and "behind" can only be lost
            if prev_box is not None and box != prev_box:
                box_static = False
            if prev_zs is not None and box_static:
                B.row({prev_zs[1]: 1.0, zs[1]: -1.0}, "<=", 0.0)
                B.row({zs[0]: 1.0, prev_zs[0]: -1.0}, "<=", 0.0)
            prev_zs = zs
            prev_box = box

    # temporal-logic rule constraints over the standard signal set
    if rule_constraints:
        binding = signal_binding(B.names, scenario)
        for r_idx, phi in enumerate(rule_constraints):
            if rules_mod.horizon_of(phi) > N:
                raise rules_mod.EncodingError(
                    f"rule {r_idx} needs steps beyond horizon {N}")
            first = len(B.lb)
            enc = rules_mod.encode_rule(phi, binding, N, first)
            for z in range(enc.n_new_binaries):
                B.var(f"rule{r_idx}_z{z}", 0.0, 1.0, binary=True)
            for coeffs, rel, rhs in enc.rows:
                B.row(coeffs, rel, rhs)

    return B.build()


def signal_binding(names: dict[str, int], scenario: Scenario) -> rules_mod.SignalBinding:
    """Bind rule signal names (s, n, vs, vn, as, an) to MILP columns."""
    N = scenario.horizon_steps
    bd = scenario.bounds
    L = scenario.corridor.length
    n_lim = scenario.corridor.width / 2.0 - EGO_HALF_WIDTH
    s_hi = L + bd.v_max * scenario.dt * N

    def per_step(prefix: str, count: int):
        return tuple(({names[f"{prefix}_{k}"]: 1.0}, 0.0) for k in range(count))

    exprs = {
        "s": per_step("s", N + 1),
        "n": per_step("n", N + 1),
        "vs": per_step("vs", N + 1),
        "vn": per_step("vn", N + 1),
        "as": per_step("as", N),
        "an": per_step("an", N),
    }
    ranges = {
        "s": (0.0, s_hi),
        "n": (-n_lim, n_lim),
        "vs": (0.0, bd.v_max),
        "vn": (-bd.v_max, bd.v_max),
        "as": (bd.a_min, bd.a_max),
        "an": (bd.a_min, bd.a_max),
    }
    return rules_mod.SignalBinding(exprs, ranges)


def milp_signal_trace(problem: MilpProblem, x: np.ndarray, N: int) -> dict[str, list[float]]:
    """Extract the rule signal trace from a solution vector."""
    out: dict[str, list[float]] = {}
    for sig, count in (("s", N + 1), ("n", N + 1), ("vs", N + 1),
                       ("vn", N + 1), ("as", N), ("an", N)):
        out[sig] = [float(x[problem.names[f"{sig}_{k}"]]) for k in range(count)]
    return out


def extract_seed(outcome: MilpOutcome, scenario: Scenario) -> Trajectory:
    """Reconstruct a cartesian warm-start trajectory from a MILP incumbent."""
    if outcome.x is None:
        raise ValueError("MILP outcome has no incumbent")
    N = scenario.horizon_steps
    dt = scenario.dt
    cor = scenario.corridor
    # rebuild the name map positions: states occupy the first 4(N+1)+2N columns
    # in construction order s, n, vs, vn blocks then as, an
    x = outcome.x
    s = x[0:N + 1]
    n = x[N + 1:2 * (N + 1)]
    vs = x[2 * (N + 1):3 * (N + 1)]
    vn = x[3 * (N + 1):4 * (N + 1)]

    states = []
    for k in range(N + 1):
        sk = min(max(float(s[k]), 0.0), cor.length)
        p = cor.from_frenet(sk, float(n[k]))
        tang = cor.tangent_at(sk)
        left = np.array([-tang[1], tang[0]])
        vel = vs[k] * tang + vn[k] * left
        speed = float(np.hypot(vel[0], vel[1]))
        if speed < 0.1:
            heading = math.atan2(tang[1], tang[0])
        else:
            heading = math.atan2(vel[1], vel[0])
        states.append(AgentState(float(p[0]), float(p[1]), heading, speed))

    # headings -> steer via the bicycle relation; accel by finite differences
    wheelbase = WHEELBASE
    full = []
    controls = []
    for k in range(N + 1):
        if k < N:
            dhead = ((states[k + 1].heading - states[k].heading + math.pi)
                     % (2 * math.pi)) - math.pi
            v = max(states[k].speed, 0.1)
            steer = math.atan2(dhead * wheelbase, v * dt)
            steer = max(-scenario.bounds.steer_max,
                        min(scenario.bounds.steer_max, steer))
            accel = (states[k + 1].speed - states[k].speed) / dt
        full.append((states[k], steer, accel))
    for k in range(N + 1):
        st, steer, accel = full[k]
        full[k] = AgentState(st.x, st.y, st.heading, st.speed, accel, steer)
    for k in range(N):
        rate = (full[k + 1].steer - full[k].steer) / dt
        controls.append((full[k].accel, rate))
    return Trajectory(tuple(full), tuple(controls), frame="cartesian")


def dump_problem(problem: MilpProblem) -> str:
    """Human-readable rendering: one line per constraint with named columns."""
    inv = {v: k for k, v in problem.names.items()}
    lines = []
    lp = problem.lp
    obj = " + ".join(f"{lp.c[j]:g}*{inv.get(j, f'x{j}')}"
                     for j in range(len(lp.c)) if lp.c[j] != 0)
    lines.append(f"min {obj}")
    for i in range(lp.A.shape[0]):
        terms = " + ".join(f"{lp.A[i, j]:g}*{inv.get(j, f'x{j}')}"
                           for j in np.flatnonzero(lp.A[i]))
        lines.append(f"{terms} {lp.relations[i]} {lp.b[i]:g}")
    for j in range(len(lp.c)):
        tag = " (binary)" if problem.binary_mask[j] else ""
        lines.append(f"{inv.get(j, f'x{j}')} in [{lp.lb[j]:g}, {lp.ub[j]:g}]{tag}")
    return "\n".join(lines)
