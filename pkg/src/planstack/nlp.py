"""Nonlinear refinement stage: kinematic-bicycle trajectory optimization with
hard feasibility/safety constraints and soft comfort costs, solved by an
augmented-Lagrangian method with a damped-Newton inner loop.

Decision vector layout: states (x, y, heading, speed) for k = 0..N followed by
controls (accel, steer) for k = 0..N-1, total (N+1)*4 + N*2 entries. The
initial state is pinned by fixing its four entries.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .world import (AgentState, RoadCorridor, Scenario, Trajectory,
                    EGO_HALF_LENGTH, EGO_HALF_WIDTH, WHEELBASE)

OBSTACLE_MARGIN = 0.5


@dataclass(frozen=True)
class NlpWeights:
    w_prog: float = 1.0
    w_acc: float = 0.1
    w_jerk_a: float = 0.5
    w_jerk_s: float = 0.5
    w_lat: float = 0.2

    def __post_init__(self):
        if min(self.w_prog, self.w_acc, self.w_jerk_a, self.w_jerk_s, self.w_lat) < 0:
            raise ValueError("weights must be >= 0")


@dataclass(frozen=True)
class ObstaclePose:
    """Predicted obstacle pose and inflated ellipse radii at one timestep."""
    x: float
    y: float
    heading: float
    ra: float
    rb: float


@dataclass
class NlpProblem:
    n_steps: int
    dt: float
    wheelbase: float
    corridor: RoadCorridor
    v_ref: float
    v_max: float
    a_min: float
    a_max: float
    steer_max: float
    steer_rate_max: float
    x0: np.ndarray                              # pinned initial state (4,)
    obstacles: list[list[ObstaclePose]]         # per obstacle, poses for k=0..N
    weights: NlpWeights = NlpWeights()
    n_lim: float = field(init=False)

    def __post_init__(self):
        if self.wheelbase <= 0:
            raise ValueError("wheelbase > 0")
        if self.dt > 0.1 + 1e-12:
            raise ValueError("dt <= 0.1 s required by the explicit integrator")
        self.x0 = np.asarray(self.x0, dtype=float)
        self.n_lim = self.corridor.width / 2.0 - EGO_HALF_WIDTH
        for traj in self.obstacles:
            if len(traj) < self.n_steps + 1:
                raise ValueError("obstacle prediction horizon mismatch")

    @property
    def n_vars(self) -> int:
        return (self.n_steps + 1) * 4 + self.n_steps * 2

    def state_idx(self, k: int) -> int:
        return 4 * k

    def control_idx(self, k: int) -> int:
        return 4 * (self.n_steps + 1) + 2 * k

    @property
    def n_eq(self) -> int:
        return 4 * self.n_steps

    @property
    def n_ineq(self) -> int:
        N = self.n_steps
        return 2 * N + 2 * N + 2 * N + 2 * N + 2 * max(N - 1, 0) \
            + len(self.obstacles) * N


def build_nlp(scenario: Scenario,
              predictions: Optional[dict[str, Sequence[AgentState]]] = None,
              weights: NlpWeights = NlpWeights()) -> NlpProblem:
    """Assemble the refinement problem from a scenario and per-obstacle
    predicted trajectories (defaults to the scripted obstacle motion)."""
    N = scenario.horizon_steps
    obstacles = []
    for ob in scenario.obstacles:
        pred = predictions.get(ob.id) if predictions else None
        if pred is not None and len(pred) < N + 1:
            raise ValueError(f"prediction horizon for obstacle {ob.id!r} "
                             f"is {len(pred) - 1}, need {N}")
        ra = ob.half_length + EGO_HALF_LENGTH + OBSTACLE_MARGIN
        rb = ob.half_width + EGO_HALF_WIDTH + OBSTACLE_MARGIN
        poses = []
        for k in range(N + 1):
            st = pred[k] if pred is not None else ob.state_at(k)
            poses.append(ObstaclePose(st.x, st.y, st.heading, ra, rb))
        obstacles.append(poses)
    ego = scenario.ego
    return NlpProblem(
        n_steps=N, dt=scenario.dt, wheelbase=WHEELBASE,
        corridor=scenario.corridor, v_ref=scenario.v_ref,
        v_max=scenario.bounds.v_max, a_min=scenario.bounds.a_min,
        a_max=scenario.bounds.a_max, steer_max=scenario.bounds.steer_max,
        steer_rate_max=scenario.bounds.steer_rate_max,
        x0=np.array([ego.x, ego.y, ego.heading, ego.speed]),
        obstacles=obstacles, weights=weights)


def _check_finite(z: np.ndarray, n_vars: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (n_vars,):
        raise ValueError(f"decision vector must have length {n_vars}")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite entries in decision vector")
    return z


def _lateral_offsets(problem: NlpProblem, z: np.ndarray):
    """Signed lateral offset and its (piecewise-constant) position gradient
    for every state k."""
    N = problem.n_steps
    ns = np.empty(N + 1)
    grads = np.empty((N + 1, 2))
    for k in range(N + 1):
        i = problem.state_idx(k)
        p = z[i:i + 2]
        s, n = problem.corridor.to_frenet(p)
        ns[k] = n
        proj = problem.corridor.from_frenet(s, 0.0)
        d = math.hypot(p[0] - proj[0], p[1] - proj[1])
        if d > 1e-9:
            # unit vector away from the projection; reduces to the left
            # normal off-vertex, and stays correct where the projection
            # clamps to a centerline vertex
            grads[k] = math.copysign(1.0, n) * (p - proj) / d
        else:
            tang = problem.corridor.tangent_at(s)
            grads[k] = (-tang[1], tang[0])
    return ns, grads


def eval_objective(problem: NlpProblem, z: np.ndarray) -> tuple[float, np.ndarray]:
    """Cost and analytic gradient."""
    z = _check_finite(z, problem.n_vars)
    N = problem.n_steps
    w = problem.weights
    g = np.zeros_like(z)
    val = 0.0

    for k in range(N + 1):
        i = problem.state_idx(k)
        dv = z[i + 3] - problem.v_ref
        val += w.w_prog * dv * dv
        g[i + 3] += 2 * w.w_prog * dv

    for k in range(N):
        i = problem.control_idx(k)
        a = z[i]
        val += w.w_acc * a * a
        g[i] += 2 * w.w_acc * a
    for k in range(N - 1):
        i0 = problem.control_idx(k)
        i1 = problem.control_idx(k + 1)
        da = z[i1] - z[i0]
        val += w.w_jerk_a * da * da
        g[i1] += 2 * w.w_jerk_a * da
        g[i0] -= 2 * w.w_jerk_a * da
        dd = z[i1 + 1] - z[i0 + 1]
        val += w.w_jerk_s * dd * dd
        g[i1 + 1] += 2 * w.w_jerk_s * dd
        g[i0 + 1] -= 2 * w.w_jerk_s * dd

    if w.w_lat > 0:
        ns, grads = _lateral_offsets(problem, z)
        for k in range(N + 1):
            i = problem.state_idx(k)
            val += w.w_lat * ns[k] ** 2
            g[i:i + 2] += 2 * w.w_lat * ns[k] * grads[k]

    return float(val), g


def eval_constraints(problem: NlpProblem, z: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Constraint values and analytic Jacobian.

    Rows: dynamics equalities (4 per step) first, then inequalities in the
    g(z) >= 0 convention: corridor, speed, accel, steer, steer rate,
    obstacle ellipses.
    """
    z = _check_finite(z, problem.n_vars)
    N = problem.n_steps
    dt = problem.dt
    L = problem.wheelbase
    m = problem.n_eq + problem.n_ineq
    c = np.zeros(m)
    J = np.zeros((m, problem.n_vars))
    r = 0

    for k in range(N):
        i0 = problem.state_idx(k)
        i1 = problem.state_idx(k + 1)
        iu = problem.control_idx(k)
        x, y, th, v = z[i0:i0 + 4]
        a, de = z[iu:iu + 2]
        cth, sth = math.cos(th), math.sin(th)
        tde = math.tan(de)

        c[r] = z[i1] - x - dt * v * cth
        J[r, i1] = 1.0
        J[r, i0] = -1.0
        J[r, i0 + 2] = dt * v * sth
        J[r, i0 + 3] = -dt * cth
        r += 1
        c[r] = z[i1 + 1] - y - dt * v * sth
        J[r, i1 + 1] = 1.0
        J[r, i0 + 1] = -1.0
        J[r, i0 + 2] = -dt * v * cth
        J[r, i0 + 3] = -dt * sth
        r += 1
        c[r] = z[i1 + 2] - th - dt * v * tde / L
        J[r, i1 + 2] = 1.0
        J[r, i0 + 2] = -1.0
        J[r, i0 + 3] = -dt * tde / L
        J[r, iu + 1] = -dt * v / (L * math.cos(de) ** 2)
        r += 1
        c[r] = z[i1 + 3] - v - dt * a
        J[r, i1 + 3] = 1.0
        J[r, i0 + 3] = -1.0
        J[r, iu] = -dt
        r += 1

    ns, ngrads = _lateral_offsets(problem, z)
    for k in range(1, N + 1):
        i = problem.state_idx(k)
        c[r] = problem.n_lim - ns[k]
        J[r, i:i + 2] = -ngrads[k]
        r += 1
        c[r] = problem.n_lim + ns[k]
        J[r, i:i + 2] = ngrads[k]
        r += 1

    for k in range(1, N + 1):
        i = problem.state_idx(k)
        c[r] = z[i + 3]
        J[r, i + 3] = 1.0
        r += 1
        c[r] = problem.v_max - z[i + 3]
        J[r, i + 3] = -1.0
        r += 1

    for k in range(N):
        i = problem.control_idx(k)
        c[r] = z[i] - problem.a_min
        J[r, i] = 1.0
        r += 1
        c[r] = problem.a_max - z[i]
        J[r, i] = -1.0
        r += 1

    for k in range(N):
        i = problem.control_idx(k)
        c[r] = problem.steer_max - z[i + 1]
        J[r, i + 1] = -1.0
        r += 1
        c[r] = problem.steer_max + z[i + 1]
        J[r, i + 1] = 1.0
        r += 1

    lim = dt * problem.steer_rate_max
    for k in range(N - 1):
        i0 = problem.control_idx(k)
        i1 = problem.control_idx(k + 1)
        dde = z[i1 + 1] - z[i0 + 1]
        c[r] = lim - dde
        J[r, i1 + 1] = -1.0
        J[r, i0 + 1] = 1.0
        r += 1
        c[r] = lim + dde
        J[r, i1 + 1] = 1.0
        J[r, i0 + 1] = -1.0
        r += 1

    for poses in problem.obstacles:
        for k in range(1, N + 1):
            i = problem.state_idx(k)
            po = poses[k]
            co, so = math.cos(po.heading), math.sin(po.heading)
            dx = z[i] - po.x
            dy = z[i + 1] - po.y
            du = co * dx + so * dy
            dv = -so * dx + co * dy
            c[r] = (du / po.ra) ** 2 + (dv / po.rb) ** 2 - 1.0
            J[r, i] = 2 * du * co / po.ra ** 2 - 2 * dv * so / po.rb ** 2
            J[r, i + 1] = 2 * du * so / po.ra ** 2 + 2 * dv * co / po.rb ** 2
            r += 1

    assert r == m
    return c, J


@dataclass(frozen=True)
class NlpBudget:
    max_outer: int = 20
    max_inner: int = 100
    time_cap: Optional[float] = None        # seconds


@dataclass
class NlpOutcome:
    status: str                 # Converged | MaxIter | Diverged
    z: np.ndarray
    objective: float
    max_violation: float
    kkt_residual: float
    outer_iterations: int
    inner_iterations: int
    solve_time: float


KKT_TOL = 1e-6
VIOLATION_TOL = 1e-6


def seed_vector(problem: NlpProblem, seed: Trajectory) -> np.ndarray:
    """Convert a trajectory to a decision vector, padding (hold last) or
    truncating to the problem horizon, then pinning the initial state."""
    N = problem.n_steps
    z = np.zeros(problem.n_vars)
    states = list(seed.states)
    while len(states) < N + 1:
        states.append(states[-1])
    for k in range(N + 1):
        st = states[k]
        i = problem.state_idx(k)
        z[i:i + 4] = (st.x, st.y, st.heading, st.speed)
    for k in range(N):
        st = states[min(k, len(states) - 1)]
        i = problem.control_idx(k)
        z[i] = st.accel
        z[i + 1] = st.steer
    z[0:4] = problem.x0
    return z


def _violation(problem: NlpProblem, c: np.ndarray) -> float:
    n_eq = problem.n_eq
    eq = np.abs(c[:n_eq]).max() if n_eq else 0.0
    iq = max(0.0, float(np.max(-c[n_eq:], initial=0.0)))
    return max(eq, iq)


def solve_nlp(problem: NlpProblem, seed: Trajectory,
              budget: NlpBudget = NlpBudget()) -> NlpOutcome:
    """Augmented-Lagrangian solve warm-started from a seed trajectory.

    Outer loop grows the quadratic penalty (x10 on insufficient feasibility
    progress) and updates multipliers; the inner loop runs damped Newton with
    a Gauss-Newton model and backtracking line search on the merit function.
    """
    t0 = time.perf_counter()
    z = seed_vector(problem, seed)
    n_eq = problem.n_eq
    free = np.ones(problem.n_vars, dtype=bool)
    free[0:4] = False                           # pinned initial state

    lam = np.zeros(n_eq)
    mu = np.zeros(problem.n_ineq)
    rho = 10.0
    total_inner = 0
    best = None                                 # (viol, obj, z, kkt)

    def al_value_grad(zv):
        f, gf = eval_objective(problem, zv)
        c, J = eval_constraints(problem, zv)
        ce, Je = c[:n_eq], J[:n_eq]
        ci, Ji = c[n_eq:], J[n_eq:]
        act = np.maximum(0.0, mu - rho * ci)
        val = (f - lam @ ce + 0.5 * rho * (ce @ ce)
               + (float(act @ act) - float(mu @ mu)) / (2 * rho))
        grad = gf - Je.T @ (lam - rho * ce) - Ji.T @ act
        return val, grad, f, c, J, act

    def gn_hessian(zv, J, act_mask):
        # Gauss-Newton curvature of cost + penalty terms
        N = problem.n_steps
        w = problem.weights
        H = np.zeros((problem.n_vars, problem.n_vars))
        for k in range(N + 1):
            i = problem.state_idx(k)
            H[i + 3, i + 3] += 2 * w.w_prog
        for k in range(N):
            i = problem.control_idx(k)
            H[i, i] += 2 * w.w_acc
        for k in range(N - 1):
            i0 = problem.control_idx(k)
            i1 = problem.control_idx(k + 1)
            for (a, b, wt) in ((i0, i1, w.w_jerk_a), (i0 + 1, i1 + 1, w.w_jerk_s)):
                H[a, a] += 2 * wt
                H[b, b] += 2 * wt
                H[a, b] -= 2 * wt
                H[b, a] -= 2 * wt
        if w.w_lat > 0:
            _, grads = _lateral_offsets(problem, zv)
            for k in range(N + 1):
                i = problem.state_idx(k)
                G = grads[k]
                H[i:i + 2, i:i + 2] += 2 * w.w_lat * np.outer(G, G)
        Je = J[:n_eq]
        H += rho * (Je.T @ Je)
        Ja = J[n_eq:][act_mask]
        if Ja.size:
            H += rho * (Ja.T @ Ja)
        return H

    status = "MaxIter"
    outer_done = 0
    prev_viol = math.inf
    for outer in range(budget.max_outer):
        outer_done = outer + 1
        inner_tol = max(KKT_TOL, 1e-2 / rho)
        tau = 1e-6
        for _ in range(budget.max_inner):
            if budget.time_cap is not None and time.perf_counter() - t0 > budget.time_cap:
                break
            try:
                val, grad, f, c, J, act = al_value_grad(z)
            except ValueError:
                status = "Diverged"
                break
            if not np.isfinite(val) or not np.all(np.isfinite(grad)):
                status = "Diverged"
                break
            if np.abs(grad[free]).max(initial=0.0) < inner_tol:
                break
            act_mask = (mu - rho * c[n_eq:]) > 0
            H = gn_hessian(z, J, act_mask)
            Hf = H[np.ix_(free, free)]
            gfree = grad[free]
            step = None
            t = tau
            for _try in range(12):
                try:
                    p = np.linalg.solve(Hf + t * np.eye(Hf.shape[0]), -gfree)
                except np.linalg.LinAlgError:
                    t *= 10
                    continue
                if p @ gfree < 0:
                    step = p
                    break
                t *= 10
            if step is None:
                break
            alpha = 1.0
            accepted = False
            slope = step @ gfree
            for _ls in range(30):
                z_try = z.copy()
                z_try[free] = z[free] + alpha * step
                try:
                    v_try = al_value_grad(z_try)[0]
                except ValueError:
                    v_try = math.inf
                if np.isfinite(v_try) and v_try <= val + 1e-4 * alpha * slope:
                    z = z_try
                    accepted = True
                    break
                alpha *= 0.5
            total_inner += 1
            if not accepted:
                break
        if status == "Diverged":
            break
        if budget.max_inner == 0 or budget.max_outer == 0:
            break

        f, gf = eval_objective(problem, z)
        c, J = eval_constraints(problem, z)
        ce, ci = c[:n_eq], c[n_eq:]
        lam_new = lam - rho * ce
        mu_new = np.maximum(0.0, mu - rho * ci)
        viol = _violation(problem, c)
        stat = gf - J[:n_eq].T @ lam_new - J[n_eq:].T @ mu_new
        kkt = float(np.abs(stat[free]).max(initial=0.0))
        if best is None or (viol, f) < (best[0], best[1]):
            best = (viol, f, z.copy(), kkt)
        lam, mu = lam_new, mu_new
        if viol < VIOLATION_TOL and kkt < KKT_TOL:
            status = "Converged"
            best = (viol, f, z.copy(), kkt)
            break
        if viol > 0.25 * prev_viol:
            rho = min(rho * 10.0, 1e8)
        prev_viol = min(prev_viol, viol)
        if budget.time_cap is not None and time.perf_counter() - t0 > budget.time_cap:
            break

    if best is None:
        f, _ = eval_objective(problem, z)
        c, J = eval_constraints(problem, z)
        best = (_violation(problem, c), f, z.copy(), math.inf)
    viol, f, z_best, kkt = best
    return NlpOutcome(status=status, z=z_best, objective=f, max_violation=viol,
                      kkt_residual=kkt, outer_iterations=outer_done,
                      inner_iterations=total_inner,
                      solve_time=time.perf_counter() - t0)


def outcome_trajectory(problem: NlpProblem, outcome: NlpOutcome) -> Trajectory:
    """Decision vector -> trajectory (states carry the applied controls)."""
    N = problem.n_steps
    z = outcome.z
    states = []
    for k in range(N + 1):
        i = problem.state_idx(k)
        iu = problem.control_idx(min(k, N - 1))
        states.append(AgentState(
            x=float(z[i]), y=float(z[i + 1]), heading=float(z[i + 2]),
            speed=float(max(0.0, z[i + 3])),
            accel=float(z[iu]), steer=float(z[iu + 1])))
    controls = []
    for k in range(N):
        iu = problem.control_idx(k)
        nxt = problem.control_idx(min(k + 1, N - 1))
        rate = (z[nxt + 1] - z[iu + 1]) / problem.dt if k + 1 < N else 0.0
        controls.append((float(z[iu]), float(rate)))
    return Trajectory(tuple(states), tuple(controls), frame="cartesian")
