"""Deterministic synthetic driving world: a trunk road with one binary fork.

Ground-truth drivers follow the trunk, pick a branch and a cruise speed at random,
and ramp to that speed with a trapezoidal profile. Both choices are invisible in the
1 s history, so futures are genuinely multimodal.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import wrap_angle
from .scenario import CATEGORY_RADIUS, MapPolyline, Scenario, Track, quantize

_FINE = 0.25  # dense path resolution, meters


@dataclass
class WorldConfig:
    trunk_length: float = 60.0
    branch_length: float = 120.0
    point_spacing: float = 2.5
    half_width: float = 5.0
    turn_radius: tuple = (20.0, 35.0)
    turn_angle_deg: tuple = (45.0, 90.0)
    num_agents: tuple = (5, 8)
    category_probs: dict = field(default_factory=lambda: {"vehicle": 0.5, "pedestrian": 0.25, "cyclist": 0.25})
    initial_speed: dict = field(default_factory=lambda: {
        "vehicle": (3.0, 9.0), "pedestrian": (0.8, 1.6), "cyclist": (2.5, 5.0)})
    cruise_factor: tuple = (0.5, 1.5)
    accel: dict = field(default_factory=lambda: {
        "vehicle": (1.0, 2.5), "pedestrian": (0.3, 0.6), "cyclist": (0.5, 1.2)})
    lane_offset: dict = field(default_factory=lambda: {
        "vehicle": 2.5, "pedestrian": 4.2, "cyclist": 3.6})
    max_speed: float = 14.0
    spawn_range: tuple = (5.0, 100.0)
    branch_prob: float = 0.5
    gap_margin: float = 0.5
    history_steps: int = 10
    future_steps: int = 80
    dt: float = 0.1
    max_attempts: int = 200

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(v) if isinstance(v, tuple) else
                    {kk: (list(vv) if isinstance(vv, tuple) else vv) for kk, vv in v.items()}
                    if isinstance(v, dict) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown world config keys: {sorted(extra)}")
        kw = {}
        for k, v in d.items():
            if isinstance(v, list):
                v = tuple(v)
            elif isinstance(v, dict):
                v = {kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()}
            kw[k] = v
        return cls(**kw)


def _resample(points: np.ndarray, spacing: float) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = max(1, int(np.ceil(s[-1] / spacing - 1e-9)))
    q = np.linspace(0.0, s[-1], n + 1)
    return np.stack([np.interp(q, s, points[:, 0]), np.interp(q, s, points[:, 1])], axis=1)


def _branch(length: float, turn: float, radius: float) -> np.ndarray:
    """Dense branch centerline leaving (0, 0) along +x; ``turn`` is signed radians."""
    if turn == 0.0:
        s = np.arange(0.0, length + 1e-9, _FINE)
        return np.stack([s, np.zeros_like(s)], axis=1)
    arc_len = abs(turn) * radius
    s = np.arange(0.0, arc_len + 1e-9, _FINE)
    ang = s / radius * np.sign(turn)
    arc = np.stack([radius * np.sin(np.abs(ang)), np.sign(turn) * radius * (1 - np.cos(ang))], axis=1)
    rest = max(length - arc_len, _FINE)
    t = np.arange(_FINE, rest + 1e-9, _FINE)
    d = np.array([np.cos(turn), np.sin(turn)])
    straight = arc[-1] + t[:, None] * d
    return np.concatenate([arc, straight], axis=0)


def _offset_path(center: np.ndarray, offset: float):
    tang = np.gradient(center, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    path = center + offset * normal
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    heading = np.unwrap(np.arctan2(tang[:, 1], tang[:, 0]))
    return path, s, heading


def _speed_profile(rng, cfg: WorldConfig, cat: str, times: np.ndarray) -> np.ndarray:
    v0 = rng.uniform(*cfg.initial_speed[cat])
    vc = float(np.clip(v0 * rng.uniform(*cfg.cruise_factor), 0.0, cfg.max_speed))
    acc = rng.uniform(*cfg.accel[cat])
    t_start = rng.uniform(0.0, 2.0)
    ramp = abs(vc - v0) / acc
    frac = np.clip((times - t_start) / max(ramp, 1e-9), 0.0, 1.0)
    return v0 + (vc - v0) * frac


def _make_network(rng, cfg: WorldConfig):
    kind = rng.integers(3)
    ang = np.deg2rad(rng.uniform(*cfg.turn_angle_deg))
    rad = rng.uniform(*cfg.turn_radius)
    if kind == 0:
        turns = (0.0, ang)
    elif kind == 1:
        turns = (0.0, -ang)
    else:
        turns = (0.5 * ang, -0.5 * ang)
    trunk = np.stack([np.arange(-cfg.trunk_length, 1e-9, _FINE),
                      np.zeros(int(round(cfg.trunk_length / _FINE)) + 1)], axis=1)
    branches = [_branch(cfg.branch_length, t, rad) for t in turns]
    return trunk, branches


def _generate_one(cfg: WorldConfig, rng: np.random.Generator, name: str) -> Scenario:
    trunk, branches = _make_network(rng, cfg)
    n_steps = cfg.history_steps + cfg.future_steps + 1
    times = (np.arange(n_steps) - cfg.history_steps) * cfg.dt
    cats = list(cfg.category_probs)
    probs = np.array([cfg.category_probs[c] for c in cats], dtype=float)
    probs /= probs.sum()

    n_agents = int(rng.integers(cfg.num_agents[0], cfg.num_agents[1] + 1))
    accepted = []  # (cat, radius, local states)
    attempts = 0
    while len(accepted) < n_agents and attempts < cfg.max_attempts:
        attempts += 1
        cat = cats[int(rng.choice(len(cats), p=probs))]
        radius = CATEGORY_RADIUS[cat]
        b = 1 if rng.random() < cfg.branch_prob else 0
        side = 1.0 if rng.random() < 0.5 else -1.0
        center = np.concatenate([trunk, branches[b][1:]], axis=0)
        path, s_path, heading = _offset_path(center, side * cfg.lane_offset[cat])
        v = _speed_profile(rng, cfg, cat, times)
        s0 = rng.uniform(*cfg.spawn_range)
        s = s0 + np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * cfg.dt)])
        if s[-1] > s_path[-1] - 1.0:
            continue
        xy = np.stack([np.interp(s, s_path, path[:, 0]), np.interp(s, s_path, path[:, 1])], axis=1)
        h = np.interp(s, s_path, heading)
        ok = True
        for _, r2, other in accepted:
            d = np.linalg.norm(other[:, :2] - xy, axis=1).min()
            if d < radius + r2 + cfg.gap_margin:
                ok = False
                break
        if ok:
            accepted.append((cat, radius, np.concatenate([xy, h[:, None]], axis=1)))

    # global rigid placement
    theta = rng.uniform(-np.pi, np.pi)
    shift = rng.uniform(-50.0, 50.0, size=2)
    c, s_ = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s_], [s_, c]])

    def place(p):
        return p @ rot.T + shift

    polylines = []
    for line in [trunk] + branches:
        polylines.append(MapPolyline(quantize(place(_resample(line, cfg.point_spacing))), cfg.half_width))
    tracks = []
    for i, (cat, radius, st) in enumerate(accepted):
        states = np.zeros((n_steps, 4))
        states[:, :2] = quantize(place(st[:, :2]))
        hq = quantize(wrap_angle(st[:, 2] + theta))
        states[:, 2] = np.where(hq > np.pi, quantize(hq - 2 * np.pi), hq)
        states[:, 3] = 1.0
        tracks.append(Track(i, cat, radius, states))
    return Scenario(polylines, tracks, cfg.dt, cfg.history_steps, cfg.future_steps, name=name)


def generate_synthetic_dataset(world_config: WorldConfig | None, count: int, seed: int) -> list:
    """``count`` scenarios; scenario ``i`` depends only on (config, seed, i)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    cfg = world_config or WorldConfig()
    return [_generate_one(cfg, np.random.default_rng([int(seed), i]), f"scene_{i:04d}")
            for i in range(count)]
