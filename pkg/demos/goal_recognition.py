"""Goal recognition two ways: inverse planning and decision trees.

First, watch the inverse-planning posterior shift toward the near goal as a
braking agent reveals its intent. Then train the tree-based recogniser on a
synthetic dataset and formally verify a property of the learned trees.
"""

import numpy as np

from planstack.prediction import (TreeProperty, extract_goals, goal_posterior,
                                  grit_infer, grit_train, grit_verify)
from planstack.world import AgentState, Trajectory, load_scenario

SCENARIO = """
{
  "corridor": {"centerline": [[0, 0], [300, 0]], "width": 10.0},
  "ego": {"x": 0.0, "y": 0.0, "heading": 0.0, "speed": 10.0},
  "obstacles": [],
  "goals": [{"s": 40.0}, {"s": 290.0}],
  "dt": 0.1, "horizon_steps": 20, "v_ref": 10.0,
  "bounds": {"v_max": 15.0, "a_min": -5.0, "a_max": 3.0,
             "steer_max": 0.5, "steer_rate_max": 2.0}
}
"""


def inverse_planning():
    scenario = load_scenario(SCENARIO)
    agent = AgentState(0.0, 0.0, 0.0, 10.0)
    goals = extract_goals(scenario, agent)

    # the agent brakes steadily, as if stopping at s = 40
    xs, speeds, v = [0.0], [10.0], 10.0
    for _ in range(25):
        v = max(0.0, v - 0.4)
        xs.append(xs[-1] + 0.1 * v)
        speeds.append(v)

    print("obs len   " + "  ".join(f"P({g.id})" for g in goals))
    for length in range(2, len(xs) + 1, 4):
        obs = Trajectory(tuple(AgentState(x, 0.0, 0.0, s)
                               for x, s in zip(xs[:length], speeds[:length])),
                         ((0.0, 0.0),) * (length - 1))
        post = goal_posterior(obs, goals, scenario)
        probs = "  ".join(f"{post.prob(g.id):11.3f}" for g in goals)
        print(f"{length:7d}   {probs}")


def tree_recognition():
    rng = np.random.default_rng(0)
    data = []
    for _ in range(800):
        f = [rng.uniform(0, 100), rng.uniform(-1, 1),
             rng.uniform(0, 15), rng.uniform(-3, 3)]
        goal = "stop" if (f[0] < 30 and f[2] < 6) else "through"
        data.append((f, goal))
    trees = grit_train(data, depth_limit=4)

    post = grit_infer(trees, [10.0, 0.0, 2.0, 0.0])
    print(f"\ntrees: close and slow -> {post.argmax} "
          f"({dict(post.probs)[post.argmax]:.2f})")

    prop = TreeProperty(box=((0.0, 20.0), (-1.0, 1.0), (0.0, 4.0),
                             (-3.0, 3.0)),
                        asserted_goal="stop")
    cx = grit_verify(trees, prop)
    print("property 'near+slow => stop' on the trained trees: "
          + ("verified" if cx is None else f"violated at {cx.features}"))


def main():
    inverse_planning()
    tree_recognition()


if __name__ == "__main__":
    main()
