"""Scenario domain model: road corridor in a curvilinear frame, agents,
trajectories, and scenario file I/O."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


# Ego vehicle geometry; the scenario format carries no ego footprint, so
# these are stack-wide parameters shared by all modules.
EGO_HALF_LENGTH = 2.25
EGO_HALF_WIDTH = 0.9
WHEELBASE = 2.8


class ValidationError(ValueError):
    """A scenario or domain-type invariant was violated."""


class ParseError(ValueError):
    """Scenario text is not well-formed."""


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class RoadCorridor:
    """Constant-width drivable corridor around a polyline centerline.

    Tangents and normals come from segment directions; the left normal is
    the +90 degree rotation of the tangent.
    """

    centerline: np.ndarray          # (K, 2) points, metres
    width: float                    # full corridor width, metres
    cumulative_arclength: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValidationError("centerline must have >= 2 points of shape (K, 2)")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("centerline points must be finite")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 1e-9):
            raise ValidationError("consecutive centerline points must be > 1e-9 m apart")
        if not (self.width > 0):
            raise ValidationError("width > 0")
        object.__setattr__(self, "centerline", pts)
        s = np.concatenate([[0.0], np.cumsum(seg_len)])
        object.__setattr__(self, "cumulative_arclength", s)

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    def segment_dirs(self) -> np.ndarray:
        seg = np.diff(self.centerline, axis=0)
        return seg / np.linalg.norm(seg, axis=1, keepdims=True)

    def to_frenet(self, p: Sequence[float]) -> tuple[float, float]:
        """Project a point onto the corridor: (arclength s, signed lateral n).

        n is positive to the left of the direction of travel. Projection
        clamps to the corridor endpoints.
        """
        p = np.asarray(p, dtype=float)
        pts = self.centerline
        a = pts[:-1]
        d = pts[1:] - a
        seg_len2 = np.einsum("ij,ij->i", d, d)
        t = np.clip(np.einsum("ij,ij->i", p - a, d) / seg_len2, 0.0, 1.0)
        proj = a + t[:, None] * d
        dist2 = np.einsum("ij,ij->i", p - proj, p - proj)
        i = int(np.argmin(dist2))
        seg_len = math.sqrt(seg_len2[i])
        s = float(self.cumulative_arclength[i] + t[i] * seg_len)
        tang = d[i] / seg_len
        delta = p - proj[i]
        cross = -tang[1] * delta[0] + tang[0] * delta[1]
        # when the projection clamps to a vertex, delta has a tangential
        # component too; report the full distance, signed by side
        dist = math.sqrt(float(dist2[i]))
        n = math.copysign(dist, cross) if dist > 0.0 else 0.0
        return s, n

    def from_frenet(self, s: float, n: float) -> np.ndarray:
        """Map curvilinear coordinates back to a cartesian point."""
        if s < -1e-9 or s > self.length + 1e-9:
            raise ValidationError(f"s={s} outside [0, {self.length}]")
        s = min(max(s, 0.0), self.length)
        cum = self.cumulative_arclength
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(max(i, 0), len(cum) - 2)
        a = self.centerline[i]
        d = self.centerline[i + 1] - a
        seg_len = cum[i + 1] - cum[i]
        t = (s - cum[i]) / seg_len
        tang = d / seg_len
        left = np.array([-tang[1], tang[0]])
        return a + t * d + n * left

    def tangent_at(self, s: float) -> np.ndarray:
        """Unit tangent of the segment containing arclength s (clamped)."""
        s = min(max(s, 0.0), self.length)
        cum = self.cumulative_arclength
        i = int(np.searchsorted(cum, s, side="right")) - 1
        i = min(max(i, 0), len(cum) - 2)
        d = self.centerline[i + 1] - self.centerline[i]
        return d / np.linalg.norm(d)

    def heading_at(self, s: float) -> float:
        t = self.tangent_at(s)
        return math.atan2(t[1], t[0])


def to_frenet(corridor: RoadCorridor, p: Sequence[float]) -> tuple[float, float]:
    return corridor.to_frenet(p)


def from_frenet(corridor: RoadCorridor, s: float, n: float) -> np.ndarray:
    return corridor.from_frenet(s, n)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    speed: float
    accel: float = 0.0
    steer: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "heading", "speed", "accel", "steer"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.speed < 0:
            raise ValidationError("speed >= 0")
        object.__setattr__(self, "heading", normalize_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Obstacle:
    id: str
    half_length: float
    half_width: float
    trajectory: tuple[AgentState, ...]   # length 1 means static

    def __post_init__(self):
        if self.half_length <= 0 or self.half_width <= 0:
            raise ValidationError("half_length, half_width > 0")
        if len(self.trajectory) < 1:
            raise ValidationError("obstacle trajectory must have >= 1 state")
        object.__setattr__(self, "trajectory", tuple(self.trajectory))

    def state_at(self, k: int) -> AgentState:
        """Scripted state at step k; constant-velocity extrapolation past the
        scripted tail (static obstacles stay put)."""
        traj = self.trajectory
        if k < len(traj):
            return traj[k]
        last = traj[-1]
        if len(traj) == 1 or last.speed == 0.0:
            return last
        extra = k - (len(traj) - 1)
        # extrapolate along final heading using the scripted step spacing
        if len(traj) >= 2:
            dt_step = np.hypot(traj[-1].x - traj[-2].x, traj[-1].y - traj[-2].y)
        else:
            dt_step = 0.0
        dx = math.cos(last.heading) * dt_step * extra
        dy = math.sin(last.heading) * dt_step * extra
        return replace(last, x=last.x + dx, y=last.y + dy)


@dataclass(frozen=True)
class Bounds:
    v_max: float
    a_min: float
    a_max: float
    steer_max: float
    steer_rate_max: float

    def __post_init__(self):
        if self.v_max <= 0:
            raise ValidationError("v_max > 0")
        if not (self.a_min < 0 < self.a_max):
            raise ValidationError("a_min < 0 < a_max")
        if self.steer_max <= 0 or self.steer_rate_max <= 0:
            raise ValidationError("steer_max, steer_rate_max > 0")


@dataclass(frozen=True)
class Goal:
    """A reachable target on the corridor: arclength s, optional exit branch id."""
    s: float
    branch: Optional[str] = None


@dataclass(frozen=True)
class Scenario:
    corridor: RoadCorridor
    ego: AgentState
    obstacles: tuple[Obstacle, ...]
    goals: tuple[Goal, ...]
    dt: float
    horizon_steps: int
    v_ref: float
    bounds: Bounds

    def __post_init__(self):
        if self.dt <= 0:
            raise ValidationError("dt > 0")
        if self.horizon_steps < 1:
            raise ValidationError("horizon_steps >= 1")
        if not (0 < self.v_ref <= self.bounds.v_max):
            raise ValidationError("0 < v_ref <= v_max")
        if abs(self.ego.steer) > self.bounds.steer_max:
            raise ValidationError("|steer| <= steer_max")
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "goals", tuple(self.goals))


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed plan: N+1 states and N (accel, steer_rate) controls."""
    states: tuple[AgentState, ...]
    controls: tuple[tuple[float, float], ...]
    frame: str = "cartesian"         # "cartesian" | "frenet"

    def __post_init__(self):
        if len(self.states) != len(self.controls) + 1:
            raise ValidationError("need len(states) == len(controls) + 1")
        if self.frame not in ("cartesian", "frenet"):
            raise ValidationError("frame must be cartesian or frenet")
        for a, r in self.controls:
            if not (math.isfinite(a) and math.isfinite(r)):
                raise ValidationError("controls must be finite")
        object.__setattr__(self, "states", tuple(self.states))
        object.__setattr__(self, "controls", tuple(tuple(c) for c in self.controls))

    @property
    def horizon(self) -> int:
        return len(self.controls)


# ---------------------------------------------------------------------------
# Scenario file I/O (JSON; unknown fields rejected)

_AGENT_FIELDS = {"x", "y", "heading", "speed", "accel", "steer"}
_BOUNDS_FIELDS = {"v_max", "a_min", "a_max", "steer_max", "steer_rate_max"}


def _require_fields(obj: dict, allowed: set, required: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise ParseError(f"{where}: missing field(s) {sorted(missing)}")


def _parse_agent(obj: dict, where: str) -> AgentState:
    if not isinstance(obj, dict):
        raise ParseError(f"{where}: expected an object")
    _require_fields(obj, _AGENT_FIELDS, {"x", "y", "heading", "speed"}, where)
    return AgentState(
        x=float(obj["x"]), y=float(obj["y"]), heading=float(obj["heading"]),
        speed=float(obj["speed"]), accel=float(obj.get("accel", 0.0)),
        steer=float(obj.get("steer", 0.0)))


def load_scenario(text: str) -> Scenario:
    """Parse and validate a scenario from its JSON file content."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON at line {e.lineno} col {e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ParseError("scenario: top level must be an object")
    _require_fields(
        raw,
        {"corridor", "ego", "obstacles", "goals", "dt", "horizon_steps", "v_ref", "bounds"},
        {"corridor", "ego", "dt", "horizon_steps", "v_ref", "bounds"},
        "scenario")

    cor = raw["corridor"]
    if not isinstance(cor, dict):
        raise ParseError("corridor: expected an object")
    _require_fields(cor, {"centerline", "width"}, {"centerline", "width"}, "corridor")
    corridor = RoadCorridor(np.asarray(cor["centerline"], dtype=float), float(cor["width"]))

    ego = _parse_agent(raw["ego"], "ego")

    obstacles = []
    for i, ob in enumerate(raw.get("obstacles", [])):
        where = f"obstacles[{i}]"
        if not isinstance(ob, dict):
            raise ParseError(f"{where}: expected an object")
        _require_fields(ob, {"id", "half_length", "half_width", "trajectory"},
                        {"id", "half_length", "half_width", "trajectory"}, where)
        traj = tuple(_parse_agent(st, f"{where}.trajectory[{j}]")
                     for j, st in enumerate(ob["trajectory"]))
        obstacles.append(Obstacle(str(ob["id"]), float(ob["half_length"]),
                                  float(ob["half_width"]), traj))
    ids = [o.id for o in obstacles]
    if len(set(ids)) != len(ids):
        raise ValidationError("obstacle ids must be unique")

    goals = []
    for i, g in enumerate(raw.get("goals", [])):
        where = f"goals[{i}]"
        if not isinstance(g, dict):
            raise ParseError(f"{where}: expected an object")
        _require_fields(g, {"s", "branch"}, {"s"}, where)
        goals.append(Goal(s=float(g["s"]), branch=g.get("branch")))

    b = raw["bounds"]
    if not isinstance(b, dict):
        raise ParseError("bounds: expected an object")
    _require_fields(b, _BOUNDS_FIELDS, _BOUNDS_FIELDS, "bounds")
    bounds = Bounds(**{k: float(b[k]) for k in _BOUNDS_FIELDS})

    return Scenario(
        corridor=corridor, ego=ego, obstacles=tuple(obstacles), goals=tuple(goals),
        dt=float(raw["dt"]), horizon_steps=int(raw["horizon_steps"]),
        v_ref=float(raw["v_ref"]), bounds=bounds)


def save_scenario(sc: Scenario) -> str:
    """Serialize a scenario back to its JSON file format."""

    def agent(a: AgentState) -> dict:
        return {"x": a.x, "y": a.y, "heading": a.heading, "speed": a.speed,
                "accel": a.accel, "steer": a.steer}

    obj = {
        "corridor": {"centerline": [[float(x), float(y)] for x, y in sc.corridor.centerline],
                     "width": sc.corridor.width},
        "ego": agent(sc.ego),
        "obstacles": [
            {"id": o.id, "half_length": o.half_length, "half_width": o.half_width,
             "trajectory": [agent(s) for s in o.trajectory]}
            for o in sc.obstacles],
        "goals": [({"s": g.s, "branch": g.branch} if g.branch is not None else {"s": g.s})
                  for g in sc.goals],
        "dt": sc.dt,
        "horizon_steps": sc.horizon_steps,
        "v_ref": sc.v_ref,
        "bounds": {"v_max": sc.bounds.v_max, "a_min": sc.bounds.a_min,
                   "a_max": sc.bounds.a_max, "steer_max": sc.bounds.steer_max,
                   "steer_rate_max": sc.bounds.steer_rate_max},
    }
    return json.dumps(obj, indent=2, sort_keys=True)
