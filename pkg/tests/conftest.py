"""Shared scenario builders for the test suite."""

import json

import pytest

from planstack import world


def make_scenario(*, centerline=((0.0, 0.0), (300.0, 0.0)), width=10.0,
                  ego=(0.0, 0.0, 0.0, 10.0), obstacles=(), goals=({"s": 290.0},),
                  dt=0.1, horizon_steps=20, v_ref=10.0,
                  v_max=15.0, a_min=-5.0, a_max=3.0,
                  steer_max=0.5, steer_rate_max=2.0) -> world.Scenario:
    """Build a scenario through the public JSON loader so every test input
    passes the same validation as external files."""
    obs = []
    for i, ob in enumerate(obstacles):
        if isinstance(ob, dict):
            obs.append(ob)
        else:  # (x, y) or (x, y, heading, speed) shorthand for a parked car
            x, y = ob[0], ob[1]
            heading = ob[2] if len(ob) > 2 else 0.0
            speed = ob[3] if len(ob) > 3 else 0.0
            obs.append({"id": f"ob{i}", "half_length": 2.0, "half_width": 0.9,
                        "trajectory": [{"x": x, "y": y, "heading": heading,
                                        "speed": speed}]})
    doc = {
        "corridor": {"centerline": [list(p) for p in centerline], "width": width},
        "ego": {"x": ego[0], "y": ego[1], "heading": ego[2], "speed": ego[3]},
        "obstacles": obs,
        "goals": [dict(g) for g in goals],
        "dt": dt, "horizon_steps": horizon_steps, "v_ref": v_ref,
        "bounds": {"v_max": v_max, "a_min": a_min, "a_max": a_max,
                   "steer_max": steer_max, "steer_rate_max": steer_rate_max},
    }
    return world.load_scenario(json.dumps(doc))


@pytest.fixture
def straight_scenario():
    return make_scenario()


@pytest.fixture
def parked_car_scenario():
    return make_scenario(obstacles=[(60.0, -1.5)])
