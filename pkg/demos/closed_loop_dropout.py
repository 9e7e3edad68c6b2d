"""Paired closed-loop runs: perfect perception vs a long-range-dropout
sensor surrogate.

The surrogate's false-negative model misses everything beyond ~40 m, so the
planner first learns about the parked car much later than with ground-truth
perception. Both runs share a seed, so the comparison is like-for-like.
"""

from pathlib import Path

from planstack import pem, simulator as sim
from planstack.world import load_scenario

SCENARIO = """
{
  "corridor": {"centerline": [[0, 0], [300, 0]], "width": 10.0},
  "ego": {"x": 0.0, "y": 0.0, "heading": 0.0, "speed": 10.0},
  "obstacles": [
    {"id": "parked", "half_length": 2.0, "half_width": 0.9,
     "trajectory": [{"x": 60.0, "y": -2.5, "heading": 0.0, "speed": 0.0}]}
  ],
  "goals": [{"s": 300.0}],
  "dt": 0.1, "horizon_steps": 20, "v_ref": 10.0,
  "bounds": {"v_max": 15.0, "a_min": -5.0, "a_max": 3.0,
             "steer_max": 0.5, "steer_rate_max": 2.0}
}
"""

DROPOUT = pem.PemParams(fn_coeffs=(-20.0, 0.5, 0.0, 0.0),
                        sigma0=0.05, sigma1=0.0, sample_count=0)


def report(name, trace):
    m = sim.evaluate(trace)
    det = sim.first_detection_step(trace, "parked")
    print(f"{name:9s} first detection step {det}, collision {m.collision}, "
          f"min separation {m.min_separation:.2f} m, "
          f"progress {m.progress:.1f} m")
    return m


def main():
    scenario = load_scenario(SCENARIO)
    steps = 70

    gt = sim.run_sim(scenario, sim.SimConfig(steps=steps, seed=5))
    sur = sim.run_sim(scenario, sim.SimConfig(steps=steps, seed=5,
                                              perception="surrogate",
                                              pem_params=DROPOUT))
    report("gt", gt)
    report("surrogate", sur)

    out = Path("dropout_demo")
    out.mkdir(exist_ok=True)
    for name, trace in (("gt", gt), ("surrogate", sur)):
        (out / f"{name}.svg").write_text(sim.trace_to_svg(trace))
        (out / f"{name}.trace.jsonl").write_text(sim.trace_to_jsonl(trace))
    print(f"traces and plots under {out}/")


if __name__ == "__main__":
    main()
