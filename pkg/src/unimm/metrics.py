"""Distributional realism metrics (histogram likelihoods, meta score), minADE and event rates."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import mean_displacement, seqsum, wrap_angle, steps_for
from .scenario import Scenario

TTC_CAP = 5.0
DIST_CAP = 40.0

# feature -> (group, low, high, bins); bins == 2 with low None marks a Bernoulli feature
FEATURES = {
    "linear_speed": ("kinematic", 0.0, 30.0, 60),
    "linear_accel": ("kinematic", -10.0, 10.0, 80),
    "angular_speed": ("kinematic", -math.pi, math.pi, 63),
    "angular_accel": ("kinematic", -4 * math.pi, 4 * math.pi, 80),
    "dist_to_nearest_object": ("interactive", -2.0, 40.0, 84),
    "collision": ("interactive", None, None, 2),
    "time_to_collision": ("interactive", 0.0, TTC_CAP, 25),
    "dist_to_road_edge": ("map", -2.0, 40.0, 84),
    "offroad": ("map", None, None, 2),
}
GROUPS = ("kinematic", "interactive", "map")
DEFAULT_WEIGHTS = {"kinematic": 0.2, "interactive": 0.5, "map": 0.3}


class FeatureError(ValueError):
    pass


@dataclass
class FeatureSeries:
    """Per-feature (A, n) arrays over evaluated agents and future steps, plus a validity mask."""

    values: dict
    mask: np.ndarray


def _central_diff(x: np.ndarray, dt: float) -> np.ndarray:
    """d/dt along the last axis: central inside, one-sided at the ends."""
    out = np.empty_like(x)
    out[..., 1:-1] = (x[..., 2:] - x[..., :-2]) / (2 * dt)
    out[..., 0] = (x[..., 1] - x[..., 0]) / dt
    out[..., -1] = (x[..., -1] - x[..., -2]) / dt
    return out


def _heading_rate(h: np.ndarray, dt: float) -> np.ndarray:
    out = np.empty_like(h)
    out[..., 1:-1] = wrap_angle(h[..., 2:] - h[..., :-2]) / (2 * dt)
    out[..., 0] = wrap_angle(h[..., 1] - h[..., 0]) / dt
    out[..., -1] = wrap_angle(h[..., -1] - h[..., -2]) / dt
    return out


def point_to_polyline(p: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Distance of points p (..., 2) to a polyline (P, 2)."""
    a, b = pts[:-1], pts[1:]
    ab = b - a
    ll = np.maximum((ab * ab).sum(-1), 1e-12)
    ap = p[..., None, :] - a
    t = np.clip((ap * ab).sum(-1) / ll, 0.0, 1.0)
    proj = a + t[..., None] * ab
    return np.sqrt(((p[..., None, :] - proj) ** 2).sum(-1)).min(-1)


def time_to_collision(p_rel: np.ndarray, v_rel: np.ndarray, radius_sum: np.ndarray) -> np.ndarray:
    """Earliest t in [0, cap] with |p + v t| = r under constant velocity (cap if none)."""
    c = (p_rel ** 2).sum(-1) - radius_sum ** 2
    bq = (p_rel * v_rel).sum(-1)
    a = (v_rel ** 2).sum(-1)
    disc = bq * bq - a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-bq - np.sqrt(np.maximum(disc, 0.0))) / a
    hit = (a > 1e-12) & (disc >= 0) & (t >= 0)
    out = np.where(hit, np.minimum(t, TTC_CAP), TTC_CAP)
    return np.where(c <= 0, 0.0, out)


def compute_features(states: np.ndarray, sc: Scenario, agents: np.ndarray | None = None) -> FeatureSeries:
    """Features over future steps (current+1 .. end) for ``agents`` (default: valid at the start)."""
    states = np.nan_to_num(np.asarray(states, dtype=float), nan=0.0, posinf=1e6, neginf=-1e6)
    if states.shape[1] < 3:
        raise FeatureError("need at least 3 steps for acceleration features")
    c, dt = sc.current_step, sc.dt
    if agents is None:
        agents = states[:, c, 3] > 0.5
    agents = np.asarray(agents, dtype=bool)
    valid = (states[..., 3] > 0.5) & agents[:, None]
    xy, h = states[..., :2], states[..., 2]
    vel = np.stack([_central_diff(xy[..., 0], dt), _central_diff(xy[..., 1], dt)], axis=-1)
    speed = np.sqrt((vel ** 2).sum(-1))
    accel = _central_diff(speed, dt)
    yaw_rate = _heading_rate(h, dt)
    yaw_acc = _central_diff(yaw_rate, dt)
    radii = np.array([t.radius for t in sc.tracks], dtype=float)

    a_n, t_n = valid.shape
    dist = np.full((a_n, t_n), DIST_CAP)
    ttc = np.full((a_n, t_n), TTC_CAP)
    for i in range(a_n):
        for j in range(a_n):
            if i == j:
                continue
            both = valid[i] & valid[j]
            d = np.sqrt(((xy[i] - xy[j]) ** 2).sum(-1)) - radii[i] - radii[j]
            dist[i] = np.where(both, np.minimum(dist[i], d), dist[i])
            tt = time_to_collision(xy[j] - xy[i], vel[j] - vel[i], radii[i] + radii[j])
            ttc[i] = np.where(both, np.minimum(ttc[i], tt), ttc[i])
    if sc.polylines:
        edge = np.min([point_to_polyline(xy, pl.points) - pl.half_width for pl in sc.polylines], axis=0)
    else:
        edge = np.full((a_n, t_n), DIST_CAP)
    fut = slice(c + 1, t_n)
    vals = {
        "linear_speed": speed, "linear_accel": accel, "angular_speed": yaw_rate, "angular_accel": yaw_acc,
        "dist_to_nearest_object": dist, "collision": (dist < 0).astype(float), "time_to_collision": ttc,
        "dist_to_road_edge": edge, "offroad": (edge > 0).astype(float),
    }
    sel = agents
    return FeatureSeries({k: v[sel][:, fut] for k, v in vals.items()}, valid[sel][:, fut])


# --- histogram likelihood -----------------------------------------------------

def bin_index(x: np.ndarray, feature: str) -> np.ndarray:
    _, lo, hi, n = FEATURES[feature]
    x = np.asarray(x, dtype=float)
    if lo is None:
        return (x > 0.5).astype(int)
    i = np.floor((x - lo) / (hi - lo) * n).astype(int)
    return np.clip(i, 0, n - 1)


def histogram_probs(samples: np.ndarray, n_bins: int, smoothing: bool = True) -> np.ndarray:
    """Bin probabilities from bin indices; smoothing adds 1/(bins * samples) mass per bin."""
    counts = np.bincount(samples, minlength=n_bins).astype(float)
    n = counts.sum()
    if smoothing:
        return (counts + 1.0 / n_bins) / (n + 1.0)
    return counts / n


def histogram_likelihood(rollout_values, gt_values, feature: str, smoothing: bool = True):
    """exp(mean log p(gt bin)) under the histogram of all rollout values. None if gt is empty."""
    gt = np.asarray(gt_values, dtype=float).ravel()
    if gt.size == 0:
        return None
    sim = np.concatenate([np.asarray(v, dtype=float).ravel() for v in rollout_values])
    n_bins = FEATURES[feature][3]
    p = histogram_probs(bin_index(sim, feature), n_bins, smoothing)
    with np.errstate(divide="ignore"):
        lp = np.log(p[bin_index(gt, feature)])
    return float(np.exp(seqsum(lp) / gt.size))


def _scene_scores(rollouts_feats, gt_feats, smoothing=True):
    """Per-feature (score, max attainable) for one scenario."""
    out = {}
    r_n = len(rollouts_feats)
    for f in FEATURES:
        m = gt_feats.mask
        gt = gt_feats.values[f][m]
        sims = [rf.values[f][rf.mask] for rf in rollouts_feats]
        s = histogram_likelihood(sims, gt, f, smoothing)
        if s is None:
            continue
        best = histogram_likelihood([gt] * r_n, gt, f, smoothing)
        out[f] = (s, best)
    return out


# --- reports ------------------------------------------------------------------

@dataclass
class RealismReport:
    feature_scores: dict
    max_attainable: dict
    group_scores: dict
    meta: float
    weights: dict
    effective_weights: dict
    min_ade: float | None = None
    collision_rate: float | None = None
    offroad_rate: float | None = None
    absent: list = field(default_factory=list)
    aggregation: str = "per-scenario histogram likelihoods, averaged over scenarios"

    def to_dict(self) -> dict:
        bins = {k: {"group": g, "low": lo, "high": hi, "bins": n} for k, (g, lo, hi, n) in FEATURES.items()}
        return {"aggregation": self.aggregation, "weights": self.weights, "effective_weights": self.effective_weights,
                "meta": self.meta, "group_scores": self.group_scores, "feature_scores": self.feature_scores,
                "max_attainable": self.max_attainable, "absent_features": self.absent, "min_ade": self.min_ade,
                "collision_rate": self.collision_rate, "offroad_rate": self.offroad_rate, "bins": bins}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def realism_meta(feature_scores: dict, weights: dict | None = None, **extra) -> RealismReport:
    weights = dict(weights or DEFAULT_WEIGHTS)
    groups = {}
    for g in GROUPS:
        vals = [v for f, v in feature_scores.items() if FEATURES[f][0] == g]
        if vals:
            groups[g] = float(np.mean(vals))
    total = sum(weights[g] for g in groups)
    eff = {g: weights[g] / total for g in groups}
    meta = float(sum(eff[g] * groups[g] for g in groups)) if groups else float("nan")
    absent = [f for f in FEATURES if f not in feature_scores]
    return RealismReport(dict(feature_scores), extra.pop("max_attainable", {}), groups, meta, weights, eff,
                         absent=absent, **extra)


def evaluate(scenes, rollouts, weights=None, smoothing: bool = True) -> RealismReport:
    """Realism report over paired scenes and rollouts (one Rollout per scene)."""
    per_feature, per_best = {}, {}
    ades, col, off = [], [], []
    for sc, ro in zip(scenes, rollouts):
        agents = ro.simulated
        gt_f = compute_features(sc.states_array(), sc, agents)
        rf = [compute_features(s, sc, agents) for s in ro.states]
        for f, (s, best) in _scene_scores(rf, gt_f, smoothing).items():
            per_feature.setdefault(f, []).append(s)
            per_best.setdefault(f, []).append(best)
        ades.append(rollout_min_ade(ro, sc))
        col.append(_any_rate(rf, "collision"))
        off.append(_any_rate(rf, "offroad"))
    fs = {f: float(np.mean(v)) for f, v in per_feature.items()}
    best = {f: float(np.mean(v)) for f, v in per_best.items()}
    ades = [a for a in ades if a is not None]
    return realism_meta(fs, weights, max_attainable=best, min_ade=float(np.mean(ades)) if ades else None,
                        collision_rate=float(np.mean(col)), offroad_rate=float(np.mean(off)))


def _any_rate(feats, name) -> float:
    hits = [np.any((f.values[name] > 0.5) & f.mask, axis=1) for f in feats]
    if not hits or hits[0].size == 0:
        return 0.0
    return float(np.mean(np.concatenate(hits)))


def collision_rate(ro, sc: Scenario) -> float:
    return _any_rate([compute_features(s, sc, ro.simulated) for s in ro.states], "collision")


def offroad_rate(ro, sc: Scenario) -> float:
    return _any_rate([compute_features(s, sc, ro.simulated) for s in ro.states], "offroad")


# --- displacement -------------------------------------------------------------

def min_ade(predictions, gt, horizon: float) -> float:
    """min over k of mean displacement to gt (n, 4) over valid steps within ``horizon``."""
    p = np.asarray(predictions, dtype=float)
    gt = np.asarray(gt, dtype=float)
    m = min(steps_for(horizon), p.shape[1], len(gt))
    d = mean_displacement(p[:, :m, :2], gt[None, :m, :2], gt[None, :m, 3] > 0.5, m)
    return float(np.min(d))


def rollout_min_ade(ro, sc: Scenario):
    """min over rollouts of the mean displacement across simulated agents and future steps."""
    gt = sc.states_array()
    c = sc.current_step
    agents = ro.simulated
    if not agents.any():
        return None
    g = gt[agents, c + 1:]
    valid = g[..., 3] > 0.5
    if not valid.any():
        return None
    per = []
    for s in ro.states:
        x = s[agents, c + 1:]
        d = np.sqrt(((x[..., :2] - g[..., :2]) ** 2).sum(-1))
        per.append(seqsum(d[valid]) / valid.sum())
    return float(np.min(per))
