"""Perception error model: fit a parametric surrogate of detector behaviour
from matched detection logs and inject the same errors into ground-truth
objects during simulation.

False negatives follow a logistic model over low-dimensional salient
variables (range, azimuth, occlusion); surviving detections get isotropic
position noise with standard deviation affine in range.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

SALIENT_NAMES = ("range", "azimuth", "occlusion")
PEM_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SalientVars:
    range: float
    azimuth: float
    occlusion: float

    def __post_init__(self):
        if self.range < 0:
            raise ValueError("range >= 0")
        if not (0.0 <= self.occlusion <= 1.0):
            raise ValueError("occlusion in [0, 1]")

    def vector(self) -> np.ndarray:
        return np.array([self.range, self.azimuth, self.occlusion])


@dataclass(frozen=True)
class GtObject:
    id: str
    x: float
    y: float
    half_length: float
    half_width: float
    salient: SalientVars
    heading: float = 0.0


@dataclass(frozen=True)
class DetectedObject:
    x: float
    y: float
    half_length: float
    half_width: float
    heading: float = 0.0


@dataclass(frozen=True)
class DetectionLogFrame:
    frame_id: int
    gt: tuple[GtObject, ...]
    detections: tuple[DetectedObject, ...]

    def __post_init__(self):
        ids = [o.id for o in self.gt]
        if len(set(ids)) != len(ids):
            raise ValueError("ground-truth ids must be unique per frame")


@dataclass(frozen=True)
class PemParams:
    fn_coeffs: tuple[float, ...]        # (intercept, w_range, w_azimuth, w_occlusion)
    sigma0: float
    sigma1: float
    sample_count: int
    std_errors: tuple[float, ...] = (math.nan,) * 4
    sigma_std_errors: tuple[float, float] = (math.nan, math.nan)
    separation_flag: bool = False
    sigma_clamped: bool = False

    def __post_init__(self):
        if self.sigma0 < 0 or self.sigma1 < 0:
            raise ValueError("sigma0, sigma1 >= 0")
        if self.sample_count < 0:
            raise ValueError("sample_count >= 0")
        if len(self.fn_coeffs) != 4:
            raise ValueError("expected 4 false-negative coefficients")

    def miss_probability(self, sv: SalientVars) -> float:
        eta = self.fn_coeffs[0] + float(np.dot(self.fn_coeffs[1:], sv.vector()))
        return 1.0 / (1.0 + math.exp(-eta)) if eta > -700 else 0.0

    def sigma(self, rng_m: float) -> float:
        return self.sigma0 + self.sigma1 * rng_m


def all_pass_params() -> PemParams:
    """A PEM that never drops and never perturbs."""
    return PemParams(fn_coeffs=(-30.0, 0.0, 0.0, 0.0), sigma0=0.0, sigma1=0.0,
                     sample_count=0)


# ---------------------------------------------------------------------------
# Matching

@dataclass(frozen=True)
class FrameMatches:
    matches: tuple[tuple[int, int], ...]    # (gt index, detection index)
    misses: tuple[int, ...]                 # unmatched gt indices
    ghosts: tuple[int, ...]                 # unmatched detection indices


def match_frames(frame: DetectionLogFrame, gate: float) -> FrameMatches:
    """Greedy nearest-first matching of detections to ground truth.

    Pairs are taken in ascending center distance; anything beyond the gate
    stays unmatched; each object is used at most once.
    """
    if gate <= 0:
        raise ValueError("gate > 0")
    pairs = []
    for i, g in enumerate(frame.gt):
        for j, d in enumerate(frame.detections):
            dist = math.hypot(g.x - d.x, g.y - d.y)
            if dist <= gate:
                pairs.append((dist, i, j))
    pairs.sort()
    used_g: set[int] = set()
    used_d: set[int] = set()
    matches = []
    for _, i, j in pairs:
        if i in used_g or j in used_d:
            continue
        used_g.add(i)
        used_d.add(j)
        matches.append((i, j))
    misses = tuple(i for i in range(len(frame.gt)) if i not in used_g)
    ghosts = tuple(j for j in range(len(frame.detections)) if j not in used_d)
    return FrameMatches(tuple(matches), misses, ghosts)


def optimal_match_distance(frame: DetectionLogFrame, gate: float) -> float:
    """Brute-force assignment oracle: minimum total distance among gated
    assignments of maximum cardinality."""
    dist = [[math.hypot(g.x - d.x, g.y - d.y) for d in frame.detections]
            for g in frame.gt]
    n_g, n_d = len(frame.gt), len(frame.detections)
    for k in range(min(n_g, n_d), 0, -1):
        best = math.inf
        for gs in itertools.combinations(range(n_g), k):
            for ds in itertools.permutations(range(n_d), k):
                if all(dist[i][j] <= gate for i, j in zip(gs, ds)):
                    best = min(best, sum(dist[i][j] for i, j in zip(gs, ds)))
        if best < math.inf:
            return best
    return 0.0


def greedy_match_distance(frame: DetectionLogFrame, matches: FrameMatches) -> float:
    return sum(math.hypot(frame.gt[i].x - frame.detections[j].x,
                          frame.gt[i].y - frame.detections[j].y)
               for i, j in matches.matches)


# ---------------------------------------------------------------------------
# Fitting

class FitError(ValueError):
    """Degenerate design matrix or insufficient data."""


_MAX_IRLS_ITER = 100
_IRLS_TOL = 1e-8
_COEF_CAP = 30.0


def fit_pem(frames: Sequence[DetectionLogFrame], gate: float) -> PemParams:
    """Fit the false-negative logistic and the range-affine noise model.

    Logistic fit by iteratively-reweighted least squares on the per-object
    miss indicator; standard errors from the observed information matrix.
    Complete separation is capped and flagged. Negative noise-model estimates
    clamp to zero with a flag.
    """
    rows = []
    labels = []
    errors = []         # (range, position error magnitude)
    for frame in frames:
        fm = match_frames(frame, gate)
        for i, j in fm.matches:
            g, d = frame.gt[i], frame.detections[j]
            rows.append(g.salient.vector())
            labels.append(0.0)
            errors.append((g.salient.range, math.hypot(g.x - d.x, g.y - d.y)))
        for i in fm.misses:
            rows.append(frame.gt[i].salient.vector())
            labels.append(1.0)

    y = np.array(labels)
    n = len(y)
    if n == 0 or y.sum() == 0 or y.sum() == n:
        # degenerate label set: logistic cannot identify slope terms
        if n == 0:
            raise FitError("no matched or missed samples to fit on")
        sigma0, sigma1, sigma_se, clamped = _fit_noise(errors)
        sign = 1.0 if y.sum() == n else -1.0
        return PemParams(fn_coeffs=(sign * _COEF_CAP, 0.0, 0.0, 0.0),
                         sigma0=sigma0, sigma1=sigma1, sample_count=n,
                         sigma_std_errors=sigma_se,
                         separation_flag=True, sigma_clamped=clamped)

    X = np.column_stack([np.ones(n), np.array(rows)])
    for col in range(1, X.shape[1]):
        if np.ptp(X[:, col]) < 1e-12:
            raise FitError(f"constant salient variable {SALIENT_NAMES[col - 1]!r}")

    beta = np.zeros(4)
    separated = False
    for _ in range(_MAX_IRLS_ITER):
        eta = np.clip(X @ beta, -_COEF_CAP, _COEF_CAP)
        p = 1.0 / (1.0 + np.exp(-eta))
        w = p * (1.0 - p)
        W = np.maximum(w, 1e-10)
        XtWX = X.T @ (X * W[:, None])
        grad = X.T @ (y - p)
        try:
            step = np.linalg.solve(XtWX, grad)
        except np.linalg.LinAlgError as e:
            raise FitError("singular design matrix in logistic fit") from e
        beta_new = beta + step
        if np.abs(beta_new).max() > _COEF_CAP * 10:
            separated = True
            beta = np.clip(beta_new, -_COEF_CAP * 10, _COEF_CAP * 10)
            break
        done = np.abs(step).max() < _IRLS_TOL
        beta = beta_new
        if done:
            break

    eta = np.clip(X @ beta, -_COEF_CAP, _COEF_CAP)
    p = 1.0 / (1.0 + np.exp(-eta))
    W = np.maximum(p * (1.0 - p), 1e-10)
    info = X.T @ (X * W[:, None])
    try:
        cov = np.linalg.inv(info)
        se = tuple(float(v) for v in np.sqrt(np.maximum(np.diag(cov), 0.0)))
    except np.linalg.LinAlgError:
        se = (math.nan,) * 4

    sigma0, sigma1, sigma_se, clamped = _fit_noise(errors)
    return PemParams(fn_coeffs=tuple(float(b) for b in beta),
                     sigma0=sigma0, sigma1=sigma1, sample_count=n,
                     std_errors=se, sigma_std_errors=sigma_se,
                     separation_flag=separated, sigma_clamped=clamped)


def _fit_noise(errors: list[tuple[float, float]]
               ) -> tuple[float, float, tuple[float, float], bool]:
    if len(errors) < 2:
        return 0.0, 0.0, (math.nan, math.nan), False
    r = np.array([e[0] for e in errors])
    mag = np.array([e[1] for e in errors])
    # least squares of error magnitude vs range; the isotropic-Gaussian mean
    # magnitude is sigma*sqrt(pi/2), so rescale to make sigma unbiased
    target = mag / math.sqrt(math.pi / 2.0)
    A = np.column_stack([np.ones(len(r)), r])
    coef, *_ = np.linalg.lstsq(A, target, rcond=None)
    resid = target - A @ coef
    dof = max(len(r) - 2, 1)
    s2 = float(resid @ resid) / dof
    try:
        cov = s2 * np.linalg.inv(A.T @ A)
        se = (float(math.sqrt(max(cov[0, 0], 0.0))),
              float(math.sqrt(max(cov[1, 1], 0.0))))
    except np.linalg.LinAlgError:
        se = (math.nan, math.nan)
    clamped = bool(coef[0] < 0 or coef[1] < 0)
    return float(max(0.0, coef[0])), float(max(0.0, coef[1])), se, clamped


# ---------------------------------------------------------------------------
# Application

def apply_pem(objects: Sequence[GtObject], params: PemParams,
              rng: np.random.Generator) -> list[GtObject]:
    """Drop and perturb ground-truth objects per the fitted model.

    Deterministic given (objects, params, rng state). Output objects live in
    the same space as the input so downstream consumers cannot tell them
    apart from ground truth.
    """
    out = []
    for obj in objects:
        p_miss = params.miss_probability(obj.salient)
        if rng.random() < p_miss:
            continue
        sig = params.sigma(obj.salient.range)
        if sig > 0:
            dx, dy = rng.normal(0.0, sig, size=2)
            obj = replace(obj, x=obj.x + dx, y=obj.y + dy)
        out.append(obj)
    return out


# ---------------------------------------------------------------------------
# Serialization

def params_to_json(params: PemParams) -> str:
    doc = {"schema_version": PEM_SCHEMA_VERSION,
           "fn_coeffs": list(params.fn_coeffs),
           "sigma0": params.sigma0, "sigma1": params.sigma1,
           "sample_count": params.sample_count,
           "std_errors": [None if math.isnan(v) else v for v in params.std_errors],
           "sigma_std_errors": [None if math.isnan(v) else v
                                for v in params.sigma_std_errors],
           "separation_flag": params.separation_flag,
           "sigma_clamped": params.sigma_clamped}
    return json.dumps(doc, indent=2, sort_keys=True)


def params_from_json(text: str) -> PemParams:
    doc = json.loads(text)
    if doc.get("schema_version") != PEM_SCHEMA_VERSION:
        raise ValueError(f"unsupported PEM schema version {doc.get('schema_version')}")
    se = tuple(math.nan if v is None else float(v) for v in doc["std_errors"])
    sse = tuple(math.nan if v is None else float(v)
                for v in doc.get("sigma_std_errors", [None, None]))
    return PemParams(fn_coeffs=tuple(float(v) for v in doc["fn_coeffs"]),
                     sigma0=float(doc["sigma0"]), sigma1=float(doc["sigma1"]),
                     sample_count=int(doc["sample_count"]), std_errors=se,
                     sigma_std_errors=sse,
                     separation_flag=bool(doc["separation_flag"]),
                     sigma_clamped=bool(doc["sigma_clamped"]))


def frame_to_json(frame: DetectionLogFrame) -> str:
    doc = {"frame_id": frame.frame_id,
           "gt": [{"id": o.id, "x": o.x, "y": o.y, "heading": o.heading,
                   "half_length": o.half_length, "half_width": o.half_width,
                   "salient": {"range": o.salient.range,
                               "azimuth": o.salient.azimuth,
                               "occlusion": o.salient.occlusion}}
                  for o in frame.gt],
           "detections": [{"x": d.x, "y": d.y, "heading": d.heading,
                           "half_length": d.half_length,
                           "half_width": d.half_width}
                          for d in frame.detections]}
    return json.dumps(doc, sort_keys=True)


def frame_from_json(text: str) -> DetectionLogFrame:
    doc = json.loads(text)
    gt = tuple(GtObject(id=str(o["id"]), x=float(o["x"]), y=float(o["y"]),
                        heading=float(o.get("heading", 0.0)),
                        half_length=float(o["half_length"]),
                        half_width=float(o["half_width"]),
                        salient=SalientVars(**o["salient"]))
               for o in doc["gt"])
    det = tuple(DetectedObject(x=float(d["x"]), y=float(d["y"]),
                               heading=float(d.get("heading", 0.0)),
                               half_length=float(d["half_length"]),
                               half_width=float(d["half_width"]))
                for d in doc["detections"])
    return DetectionLogFrame(int(doc["frame_id"]), gt, det)


def load_log(text: str) -> list[DetectionLogFrame]:
    """JSONL detection log, one frame per line."""
    return [frame_from_json(line) for line in text.splitlines() if line.strip()]
