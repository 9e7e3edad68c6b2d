"""Acceptance gate: ten end-to-end criteria, one pass/fail line each.

Run with `pytest tests/test_acceptance.py -v -s` to see the verdict lines.
Every criterion recomputes its evidence from scratch against the oracles
frozen in the per-module test files; nothing here trusts solver-internal
bookkeeping.
"""

import math
import time

import numpy as np
import pytest

from planstack import milp, nlp, pem, prediction as pred, rules
from planstack import simulator as sim, world
from planstack.cli import EXIT_OK, dispatch
from planstack.milp import build_milp, extract_seed, solve_milp
from planstack.nlp import (build_nlp, eval_constraints, eval_objective,
                           seed_vector, solve_nlp)
from planstack.planner import plan_cycle
from planstack.prediction import (extract_goals, goal_cost_gaps,
                                  goal_posterior, grit_infer, grit_train,
                                  grit_verify, Counterexample, TreeProperty)
from planstack.rules import parse_rule, robustness, EPSILON
from planstack.world import AgentState, Trajectory

from conftest import make_scenario
from test_milp import milp_enumeration_oracle
from test_nlp import _fd_gradient, _random_z
from test_pem import synthetic_log
from test_prediction import _toy_dataset, naive_descent
from test_rules import _solve_encoded


def _verdict(label: str, ok: bool, detail: str = "") -> None:
    line = f"{label}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  ({detail})"
    print(line)


# ---------------------------------------------------------------------------
# 1. MILP correctness against exhaustive enumeration


def _random_planning_milp(rng):
    """Small planning MILPs: one obstacle, 2-3 steps, <= 12 binaries."""
    n_steps = int(rng.integers(2, 4))
    speed = float(rng.uniform(5.0, 12.0))
    x = float(rng.uniform(2.0, 12.0))
    y = float(rng.uniform(-2.0, 2.0))
    sc = make_scenario(horizon_steps=n_steps, ego=(0.0, 0.0, 0.0, speed),
                       obstacles=[(x, y)])
    return build_milp(sc)


def test_ac1_milp_matches_enumeration():
    rng = np.random.default_rng(101)
    worst_gap = 0.0
    worst_time = 0.0
    ok = True
    for _ in range(50):
        problem = _random_planning_milp(rng)
        assert problem.n_binaries <= 12
        t0 = time.perf_counter()
        out = solve_milp(problem, gap_tol=1e-9)
        elapsed = time.perf_counter() - t0
        worst_time = max(worst_time, elapsed)
        oracle = milp_enumeration_oracle(problem)
        if out.status == "Infeasible":
            ok &= math.isinf(oracle)
        else:
            gap = abs(out.objective - oracle)
            worst_gap = max(worst_gap, gap)
            ok &= gap <= 1e-6
        ok &= elapsed < 1.0
    _verdict("AC1 milp-vs-enumeration", ok,
             f"max gap {worst_gap:.2e}, max time {worst_time:.3f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. Warm-start benefit on a fixed 20-scenario suite


def _warm_start_suite():
    rng = np.random.default_rng(2024)
    out = []
    for i in range(10):
        kind = i % 3
        if kind == 0:
            out.append(make_scenario(
                obstacles=[(13.5 + 3 * rng.uniform(),
                            0.3 * rng.uniform() - 0.15)]))
        elif kind == 1:
            out.append(make_scenario(
                obstacles=[(11.5 + rng.uniform(), -1.5), (21.0, 1.5)]))
        else:
            out.append(make_scenario(
                obstacles=[(11.0 + 3 * rng.uniform(),
                            -1.2 - rng.uniform())]))
    for i in range(10):
        bend = float(4.0 + 6.0 * rng.uniform()) * (1.0 if i % 2 == 0 else -1.0)
        out.append(make_scenario(
            centerline=((0, 0), (15, 0), (30, 0.5 * bend),
                        (40, 0.5 * bend + abs(bend))),
            horizon_steps=(30, 35, 40)[i % 3], goals=({"s": 45.0},)))
    return out


def _zero_seed(sc):
    states = tuple(AgentState(0.0, 0.0, 0.0, 0.0)
                   for _ in range(sc.horizon_steps + 1))
    return Trajectory(states, ((0.0, 0.0),) * sc.horizon_steps)


def test_ac2_warm_start_benefit():
    t0 = time.perf_counter()
    pairs = []
    for sc in _warm_start_suite():
        problem = build_nlp(sc)
        seed = extract_seed(solve_milp(build_milp(sc)), sc)
        pairs.append((solve_nlp(problem, seed),
                      solve_nlp(problem, _zero_seed(sc))))
    total = time.perf_counter() - t0

    warm_conv = sum(w.status == "Converged" for w, _ in pairs)
    cold_conv = sum(c.status == "Converged" for _, c in pairs)
    warm_med = float(np.median([w.inner_iterations for w, _ in pairs]))
    cold_med = float(np.median([c.inner_iterations for _, c in pairs]))
    obj_ok = all(w.objective <= c.objective + 1e-6 for w, c in pairs
                 if w.status == c.status == "Converged")
    ok = (warm_conv >= cold_conv and warm_med < cold_med
          and obj_ok and total < 60.0)
    _verdict("AC2 warm-start-benefit", ok,
             f"conv {warm_conv}/{cold_conv}, median iters "
             f"{warm_med:g}/{cold_med:g}, suite {total:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. Derivative correctness at 100 random points per family


_FAMILIES = {
    "empty": dict(obstacles=(), horizon_steps=5),
    "obstacle": dict(obstacles=[(8.0, -1.0)], horizon_steps=5),
    "curved": dict(centerline=((0, 0), (20, 0), (35, 10), (35, 40)),
                   horizon_steps=5),
}


def test_ac3_derivatives_match_finite_differences():
    h = 1e-6
    worst = 0.0
    ok = True
    for seed, (name, kw) in enumerate(_FAMILIES.items()):
        problem = build_nlp(make_scenario(**kw))
        rng = np.random.default_rng(300 + seed)
        for _ in range(100):
            z = _random_z(problem, rng)
            _, g = eval_objective(problem, z)
            g_fd = _fd_gradient(lambda zz: eval_objective(problem, zz)[0], z, h)
            rel = (np.linalg.norm(g - g_fd)
                   / max(1.0, np.linalg.norm(g_fd)))
            _, J = eval_constraints(problem, z)
            J_fd = np.empty_like(J)
            for j in range(problem.n_vars):
                zp, zm = z.copy(), z.copy()
                zp[j] += h
                zm[j] -= h
                J_fd[:, j] = (eval_constraints(problem, zp)[0]
                              - eval_constraints(problem, zm)[0]) / (2 * h)
            rel = max(rel, np.linalg.norm(J - J_fd)
                      / max(1.0, np.linalg.norm(J_fd)))
            worst = max(worst, rel)
            ok &= rel < 1e-5
    _verdict("AC3 derivative-check", ok, f"worst rel err {worst:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 4. Feasibility gate on every converged plan


def test_ac4_converged_plans_are_feasible():
    rng = np.random.default_rng(404)
    checked = 0
    worst_eq = 0.0
    worst_iq = 0.0
    ok = True
    for _ in range(30):
        n_obs = int(rng.integers(0, 3))
        obstacles = [(float(rng.uniform(12.0, 60.0)),
                      float(rng.uniform(-3.0, 3.0))) for _ in range(n_obs)]
        sc = make_scenario(obstacles=obstacles,
                           ego=(0.0, 0.0, 0.0, float(rng.uniform(5.0, 12.0))),
                           horizon_steps=int(rng.integers(10, 25)))
        result = plan_cycle(sc)
        if result.source != "NlpConverged":
            continue
        problem = build_nlp(sc)
        z = seed_vector(problem, result.trajectory)
        c, _ = eval_constraints(problem, z)
        eq = float(np.abs(c[:problem.n_eq]).max()) if problem.n_eq else 0.0
        iq = float(np.min(c[problem.n_eq:])) if problem.n_ineq else 0.0
        worst_eq = max(worst_eq, eq)
        worst_iq = min(worst_iq, iq)
        ok &= eq < 1e-6 and iq >= -1e-6
        checked += 1
    ok &= checked >= 15          # the property must actually get exercised
    _verdict("AC4 feasibility-gate", ok,
             f"{checked} converged plans, max |eq| {worst_eq:.2e}, "
             f"min ineq {worst_iq:.2e}")
    assert ok


# ---------------------------------------------------------------------------
# 5. STL encoding soundness on 100 random formulas


def _random_formula(rng, depth):
    if depth == 0 or rng.random() < 0.3:
        c = round(float(rng.uniform(0.0, 15.0)), 2)
        op = "<=" if rng.random() < 0.5 else ">="
        return f"v {op} {c}"
    pick = rng.integers(0, 4)
    if pick == 0:
        return (f"({_random_formula(rng, depth - 1)} & "
                f"{_random_formula(rng, depth - 1)})")
    if pick == 1:
        return (f"({_random_formula(rng, depth - 1)} | "
                f"{_random_formula(rng, depth - 1)})")
    a = int(rng.integers(0, 4))
    b = int(rng.integers(a, 6))
    kind = "G" if pick == 2 else "F"
    return f"{kind}[{a},{b}]({_random_formula(rng, depth - 1)})"


def test_ac5_stl_incumbents_are_sound():
    rng = np.random.default_rng(505)
    n_steps = 10
    checked = 0
    worst = math.inf
    ok = True
    while checked < 100:
        phi = parse_rule(_random_formula(rng, int(rng.integers(1, 4))))
        c_speed = rng.normal(size=n_steps + 1)
        try:
            out = _solve_encoded(phi, n_steps, c_speed)
        except rules.EncodingError:
            continue            # nested intervals overran the horizon
        if out.status != "Optimal":
            continue            # contradictory formula; no incumbent to check
        rho = robustness(phi, {"v": list(out.x[:n_steps + 1])})
        worst = min(worst, rho)
        ok &= rho >= -1e-4
        checked += 1
    _verdict("AC5 stl-soundness", ok,
             f"100 incumbents, min robustness {worst:.2e} "
             f"(epsilon {EPSILON:g})")
    assert ok


# ---------------------------------------------------------------------------
# 6. Inverse-planning posterior: normalization and the 0.9 threshold


def test_ac6_posterior_normalized_and_threshold():
    ok = True
    # normalization over randomized observations and goal sets
    rng = np.random.default_rng(606)
    worst_norm = 0.0
    for _ in range(50):
        gs = tuple({"s": float(s)} for s in
                   sorted(rng.uniform(30.0, 290.0, size=rng.integers(1, 5))))
        sc = make_scenario(goals=gs)
        v0 = float(rng.uniform(2.0, 12.0))
        agent = AgentState(0.0, 0.0, 0.0, v0)
        goals = extract_goals(sc, agent)
        xs, v = [0.0], v0
        for _ in range(int(rng.integers(1, 15))):
            v = max(0.0, v + float(rng.uniform(-0.5, 0.3)))
            xs.append(xs[-1] + 0.1 * v)
        obs = Trajectory(tuple(AgentState(x, 0.0, 0.0, v0) for x in xs),
                         ((0.0, 0.0),) * (len(xs) - 1))
        post = goal_posterior(obs, goals, sc,
                              beta=float(rng.uniform(0.2, 4.0)))
        worst_norm = max(worst_norm,
                         abs(sum(p for _, p in post.probs) - 1.0))
    ok &= worst_norm < 1e-9

    # two-goal threshold: first step with P(near) > 0.9 vs the analytic
    # cost-gap boundary ln(9)/beta, within one observation step
    beta = 1.0
    sc = make_scenario(goals=({"s": 40.0}, {"s": 290.0}))
    goals = extract_goals(sc, AgentState(0.0, 0.0, 0.0, 10.0))
    near = min(range(len(goals)), key=lambda i: goals[i].s)
    far = 1 - near
    xs, speeds, v = [0.0], [10.0], 10.0
    for _ in range(25):
        v = max(0.0, v - 0.4)
        xs.append(xs[-1] + 0.1 * v)
        speeds.append(v)
    step_post = step_gap = None
    for L in range(2, len(xs) + 1):
        obs = Trajectory(tuple(AgentState(x, 0.0, 0.0, s)
                               for x, s in zip(xs[:L], speeds[:L])),
                         ((0.0, 0.0),) * (L - 1))
        post = goal_posterior(obs, goals, sc, beta=beta)
        delta = goal_cost_gaps(obs, goals, sc)
        if step_post is None and post.prob(goals[near].id) > 0.9:
            step_post = L
        if step_gap is None and delta[far] - delta[near] > math.log(9.0) / beta:
            step_gap = L
    ok &= step_post is not None and step_gap is not None
    ok &= step_post is not None and step_gap is not None \
        and abs(step_post - step_gap) <= 1
    _verdict("AC6 inverse-planning-posterior", ok,
             f"max |1-sum| {worst_norm:.1e}, crossing at obs "
             f"{step_post} vs analytic {step_gap}")
    assert ok


# ---------------------------------------------------------------------------
# 7. GRIT: oracle equality, sound verification, held-out accuracy


def test_ac7_grit_oracle_verify_accuracy():
    trees = grit_train(_toy_dataset(800, seed=3), depth_limit=4)
    rng = np.random.default_rng(707)
    ok = True
    for _ in range(1000):
        f = [float(rng.uniform(0, 100)), float(rng.uniform(-1, 1)),
             float(rng.uniform(0, 15)), float(rng.uniform(-3, 3))]
        post = dict(grit_infer(trees, f).probs)
        oracle = naive_descent(trees, f)
        ok &= all(abs(post[g] - oracle[g]) < 1e-12 for g in oracle)

    verified = violated = 0
    for _ in range(20):
        lo = rng.uniform([0, -1, 0, -3], [50, 0, 8, 0])
        hi = lo + rng.uniform([5, 0.2, 2, 0.5], [50, 1, 7, 3])
        prop = TreeProperty(box=tuple(zip(lo.tolist(), hi.tolist())),
                            asserted_goal="stop" if rng.random() < 0.5
                            else "through")
        cx = grit_verify(trees, prop)
        if cx is None:
            verified += 1
        else:
            ok &= isinstance(cx, Counterexample)
            ok &= grit_infer(trees, cx.features).argmax != prop.asserted_goal
            ok &= all(l <= v <= h for (l, h), v
                      in zip(prop.box, cx.features))
            violated += 1

    test_set = _toy_dataset(500, seed=4)
    acc = (sum(grit_infer(trees, f).argmax == g for f, g in test_set)
           / len(test_set))
    ok &= acc >= 0.9
    _verdict("AC7 grit", ok,
             f"1000 oracle matches, {verified} verified / {violated} "
             f"witnesses, held-out acc {acc:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 8. PEM recovery from a seeded synthetic log


def test_ac8_pem_recovery_and_recall_curve():
    true_fn = (-2.0, 0.05, 0.0, 0.0)
    sigma0, sigma1 = 0.1, 0.01
    frames = synthetic_log(10_000, coeffs=true_fn, sigma0=sigma0,
                           sigma1=sigma1, seed=808)
    fitted = pem.fit_pem(frames, gate=5.0)
    ok = True
    worst_z = 0.0
    for est, se, truth in zip(fitted.fn_coeffs, fitted.std_errors, true_fn):
        z = abs(est - truth) / se
        worst_z = max(worst_z, z)
        ok &= z <= 3.0
    for est, se, truth in zip((fitted.sigma0, fitted.sigma1),
                              fitted.sigma_std_errors, (sigma0, sigma1)):
        z = abs(est - truth) / se
        worst_z = max(worst_z, z)
        ok &= z <= 3.0

    # recall vs range: fitted model sampled, analytic logistic from the
    # generator, 10 m bins over [0, 100) with 1e4 draws each
    rng = np.random.default_rng(809)
    worst_bin = 0.0
    for b in range(10):
        ranges = rng.uniform(10.0 * b, 10.0 * (b + 1), size=10_000)
        objects = [pem.GtObject(id=str(i), x=float(r), y=0.0,
                                half_length=2.0, half_width=0.9,
                                salient=pem.SalientVars(range=float(r),
                                                        azimuth=0.0,
                                                        occlusion=0.0))
                   for i, r in enumerate(ranges)]
        kept = pem.apply_pem(objects, fitted, rng)
        empirical = len(kept) / len(objects)
        eta = true_fn[0] + true_fn[1] * ranges
        analytic = float(np.mean(1.0 - 1.0 / (1.0 + np.exp(-eta))))
        worst_bin = max(worst_bin, abs(empirical - analytic))
        ok &= abs(empirical - analytic) <= 0.02
    _verdict("AC8 pem-recovery", ok,
             f"worst |z| {worst_z:.2f}, worst recall gap {worst_bin:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 9. Closed loop: nominal suite plus the paired dropout run


def _nominal_suite():
    rng = np.random.default_rng(77)
    out = [("empty", make_scenario())]
    for i in range(4):
        out.append((f"roadside{i}",
                    make_scenario(obstacles=[(45.0 + 10.0 * rng.uniform(),
                                              -2.5 - 0.5 * rng.uniform())])))
    for i in range(2):
        out.append((f"pass{i}",
                    make_scenario(obstacles=[(55.0 + 5.0 * rng.uniform(),
                                              -2.2)])))
    out.append(("two", make_scenario(obstacles=[(40.0, -2.5), (60.0, 2.5)])))
    curve = ((0, 0), (40, 0), (75, 12), (95, 35))
    out.append(("curve", make_scenario(centerline=curve,
                                       goals=({"s": 100.0},))))
    out.append(("curveobs", make_scenario(centerline=curve,
                                          obstacles=[(45.0, -2.5)],
                                          goals=({"s": 100.0},))))
    return out


def test_ac9_closed_loop_nominal_and_dropout():
    steps = 40
    ok = True
    worst_margin = math.inf
    for name, sc in _nominal_suite():
        metrics = sim.evaluate(sim.run_sim(sc, sim.SimConfig(steps=steps,
                                                             seed=5)))
        need = 0.8 * sc.v_ref * steps * sc.dt
        worst_margin = min(worst_margin, metrics.progress - need)
        ok &= not metrics.collision and metrics.progress >= need

    # paired run on the critical scenario: long-range dropout PEM
    crit = make_scenario(obstacles=[(60.0, -2.5)])
    dropout = pem.PemParams(fn_coeffs=(-20.0, 0.5, 0.0, 0.0),
                            sigma0=0.05, sigma1=0.0, sample_count=0)
    gt = sim.run_sim(crit, sim.SimConfig(steps=70, seed=5))
    sur = sim.run_sim(crit, sim.SimConfig(steps=70, seed=5,
                                          perception="surrogate",
                                          pem_params=dropout))
    det_gt = sim.first_detection_step(gt, "ob0")
    det_sur = sim.first_detection_step(sur, "ob0")
    ok &= det_gt is not None and det_sur is not None and det_sur > det_gt
    sur_coll = sim.evaluate(sur).collision
    _verdict("AC9 closed-loop", ok,
             f"10 nominal runs, min progress margin {worst_margin:.1f} m, "
             f"detection {det_gt}->{det_sur}, surrogate collision "
             f"{sur_coll} [reported]")
    assert ok


# ---------------------------------------------------------------------------
# 10. Byte determinism of seeded subcommands


def test_ac10_repeat_runs_byte_identical(tmp_path, capsys):
    scene = tmp_path / "scene.json"
    scene.write_text(world.save_scenario(
        make_scenario(obstacles=[(45.0, -2.5)], horizon_steps=15)))
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = dispatch(["simulate", str(scene), "--steps", "12",
                         "--seed", "9", "--out", str(out)])
        capsys.readouterr()
        assert code == EXIT_OK
        blobs.append(((out / "scene.trace.jsonl").read_bytes(),
                      (out / "scene.metrics.csv").read_bytes()))
    ok = blobs[0] == blobs[1]
    with capsys.disabled():
        _verdict("AC10 determinism", ok,
                 f"{len(blobs[0][0])} trace bytes, "
                 f"{len(blobs[0][1])} metrics bytes")
    assert ok
