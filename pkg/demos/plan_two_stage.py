"""Walk one planning cycle by hand: MILP seed, then NLP refinement.

Shows why the two stages exist — the mixed-integer stage decides which side
of each obstacle to pass and returns a kinematically rough seed; the
nonlinear stage polishes it into a bicycle-feasible trajectory.
"""

import numpy as np

from planstack import milp, nlp
from planstack.world import load_scenario

SCENARIO = """
{
  "corridor": {"centerline": [[0, 0], [150, 0]], "width": 10.0},
  "ego": {"x": 0.0, "y": 0.0, "heading": 0.0, "speed": 10.0},
  "obstacles": [
    {"id": "parked", "half_length": 2.0, "half_width": 0.9,
     "trajectory": [{"x": 16.0, "y": -0.4, "heading": 0.0, "speed": 0.0}]}
  ],
  "goals": [{"s": 150.0}],
  "dt": 0.1, "horizon_steps": 25, "v_ref": 10.0,
  "bounds": {"v_max": 15.0, "a_min": -5.0, "a_max": 3.0,
             "steer_max": 0.5, "steer_rate_max": 2.0}
}
"""


def main():
    scenario = load_scenario(SCENARIO)

    problem = milp.build_milp(scenario)
    print(f"MILP: {len(problem.lp.c)} columns, {problem.n_binaries} binaries")
    outcome = milp.solve_milp(problem)
    print(f"  {outcome.status} after {outcome.node_count} nodes, "
          f"objective {outcome.objective:.3f}")

    seed = milp.extract_seed(outcome, scenario)
    ys = [st.y for st in seed.states]
    side = "left" if max(ys, key=abs) > 0 else "right"
    print(f"  seed passes the parked car on the {side} "
          f"(peak |y| = {max(np.abs(ys)):.2f} m)")

    nprob = nlp.build_nlp(scenario)
    refined = nlp.solve_nlp(nprob, seed)
    print(f"NLP: {refined.status} in {refined.inner_iterations} Newton steps, "
          f"max violation {refined.max_violation:.1e}, "
          f"objective {refined.objective:.3f}")

    traj = nlp.outcome_trajectory(nprob, refined)
    print("\n  k      x       y    speed   steer")
    for k in range(0, scenario.horizon_steps + 1, 5):
        st = traj.states[k]
        print(f"  {k:2d}  {st.x:6.2f}  {st.y:6.2f}  {st.speed:6.2f}  "
              f"{st.steer:+.3f}")


if __name__ == "__main__":
    main()
