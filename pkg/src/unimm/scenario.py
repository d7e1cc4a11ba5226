"""Scenario data model, canonical JSON document format and open-loop sample extraction."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

CATEGORIES = ("vehicle", "pedestrian", "cyclist")
CATEGORY_RADIUS = {"vehicle": 2.0, "pedestrian": 0.4, "cyclist": 0.8}
TAU = 0.5

# quantization slack for headings written with 6 decimals
_HEADING_SLACK = 5e-7


class ScenarioFormatError(ValueError):
    """Malformed scenario document."""


class ScenarioValidationError(ValueError):
    """Document parsed but violates a scenario invariant."""


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    heading: float
    valid: bool


@dataclass
class Track:
    agent_id: int
    category: str
    radius: float
    states: np.ndarray  # (T, 4): x, y, heading, valid

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 4)

    def state(self, i: int) -> AgentState:
        x, y, h, v = self.states[i]
        return AgentState(float(x), float(y), float(h), bool(v > 0.5))

    @property
    def valid(self) -> np.ndarray:
        return self.states[:, 3] > 0.5


@dataclass
class MapPolyline:
    points: np.ndarray  # (P, 2)
    half_width: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)


@dataclass
class Scenario:
    polylines: list
    tracks: list
    dt: float = 0.1
    history_steps: int = 10
    future_steps: int = 80
    name: str = field(default="", compare=False)

    @property
    def num_steps(self) -> int:
        return self.history_steps + self.future_steps + 1

    @property
    def current_step(self) -> int:
        return self.history_steps

    def states_array(self) -> np.ndarray:
        """(A, T, 4) stacked track states."""
        if not self.tracks:
            return np.zeros((0, self.num_steps, 4))
        return np.stack([t.states for t in self.tracks])

    def with_states(self, states: np.ndarray, name: Optional[str] = None) -> "Scenario":
        tracks = [Track(t.agent_id, t.category, t.radius, np.array(s, dtype=float))
                  for t, s in zip(self.tracks, states)]
        return Scenario(self.polylines, tracks, self.dt, self.history_steps, self.future_steps,
                        name=self.name if name is None else name)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        if (self.dt, self.history_steps, self.future_steps) != (other.dt, other.history_steps, other.future_steps):
            return False
        if len(self.polylines) != len(other.polylines) or len(self.tracks) != len(other.tracks):
            return False
        for a, b in zip(self.polylines, other.polylines):
            if a.half_width != b.half_width or not np.array_equal(a.points, b.points):
                return False
        for a, b in zip(self.tracks, other.tracks):
            if (a.agent_id, a.category, a.radius) != (b.agent_id, b.category, b.radius):
                return False
            if not np.array_equal(a.states, b.states):
                return False
        return True


def validate_scenario(sc: Scenario) -> Scenario:
    if sc.dt <= 0:
        raise ScenarioValidationError("dt must be positive")
    if sc.history_steps < 0 or sc.future_steps < 1:
        raise ScenarioValidationError("history_steps >= 0 and future_steps >= 1 required")
    n = sc.num_steps
    ids = set()
    for i, pl in enumerate(sc.polylines):
        if len(pl.points) < 2:
            raise ScenarioValidationError(f"polylines[{i}] has fewer than 2 points")
        if not pl.half_width > 0:
            raise ScenarioValidationError(f"polylines[{i}].half_width must be > 0")
    for i, tr in enumerate(sc.tracks):
        if tr.category not in CATEGORIES:
            raise ScenarioValidationError(f"tracks[{i}].category {tr.category!r} unknown")
        if not tr.radius > 0:
            raise ScenarioValidationError(f"tracks[{i}].radius must be > 0")
        if tr.states.shape[0] != n:
            raise ScenarioValidationError(
                f"tracks[{i}] has {tr.states.shape[0]} states, scenario has {n} steps")
        if tr.agent_id in ids:
            raise ScenarioValidationError(f"duplicate agent id {tr.agent_id}")
        ids.add(tr.agent_id)
        h = tr.states[:, 2]
        if np.any(h > np.pi + _HEADING_SLACK) or np.any(h <= -np.pi - _HEADING_SLACK):
            raise ScenarioValidationError(f"tracks[{i}] heading outside (-pi, pi]")
        if not np.all(np.isfinite(tr.states)):
            raise ScenarioValidationError(f"tracks[{i}] has non-finite states")
    return sc


# --- canonical document -----------------------------------------------------

def _f(v: float) -> str:
    s = f"{float(v) + 0.0:.6f}"
    return "0.000000" if s == "-0.000000" else s


def quantize(a) -> np.ndarray:
    """Round to the values the 6-decimal document format represents."""
    a = np.asarray(a, dtype=float)
    q = np.array([float(_f(v)) for v in a.ravel()]).reshape(a.shape)
    return q


def save_scenario(sc: Scenario) -> bytes:
    lines = ["{",
             f'"dt": {_f(sc.dt)},',
             f'"history_steps": {int(sc.history_steps)},',
             f'"future_steps": {int(sc.future_steps)},',
             '"polylines": [']
    for i, pl in enumerate(sc.polylines):
        pts = ", ".join(f"[{_f(x)}, {_f(y)}]" for x, y in pl.points)
        sep = "," if i < len(sc.polylines) - 1 else ""
        lines.append(f'{{"points": [{pts}], "half_width": {_f(pl.half_width)}}}{sep}')
    lines.append("],")
    lines.append('"tracks": [')
    for i, tr in enumerate(sc.tracks):
        st = ", ".join(f"[{_f(x)}, {_f(y)}, {_f(h)}, {'true' if v > 0.5 else 'false'}]"
                       for x, y, h, v in tr.states)
        sep = "," if i < len(sc.tracks) - 1 else ""
        lines.append(f'{{"id": {int(tr.agent_id)}, "category": "{tr.category}", '
                     f'"radius": {_f(tr.radius)}, "states": [{st}]}}{sep}')
    lines.append("]")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _need(obj, key, where, kind):
    if not isinstance(obj, dict) or key not in obj:
        raise ScenarioFormatError(f"missing field {where}{key}")
    v = obj[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ScenarioFormatError(f"field {where}{key} must be a number")
        return float(v)
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ScenarioFormatError(f"field {where}{key} must be an integer")
        return v
    if not isinstance(v, kind):
        raise ScenarioFormatError(f"field {where}{key} has wrong type")
    return v


def load_scenario(data: bytes, name: str = "") -> Scenario:
    try:
        doc = json.loads(data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ScenarioFormatError(f"not a JSON document: {e}") from e
    if not isinstance(doc, dict):
        raise ScenarioFormatError("top level must be an object")
    dt = _need(doc, "dt", "", float)
    hist = _need(doc, "history_steps", "", int)
    fut = _need(doc, "future_steps", "", int)
    polylines = []
    for i, p in enumerate(_need(doc, "polylines", "", list)):
        where = f"polylines[{i}]."
        pts = _need(p, "points", where, list)
        try:
            arr = np.array(pts, dtype=float)
        except (TypeError, ValueError) as e:
            raise ScenarioFormatError(f"field {where}points must be [[x, y], ...]") from e
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ScenarioFormatError(f"field {where}points must be [[x, y], ...]")
        polylines.append(MapPolyline(arr, _need(p, "half_width", where, float)))
    tracks = []
    for i, t in enumerate(_need(doc, "tracks", "", list)):
        where = f"tracks[{i}]."
        aid = _need(t, "id", where, int)
        cat = _need(t, "category", where, str)
        rad = _need(t, "radius", where, float)
        raw = _need(t, "states", where, list)
        states = np.zeros((len(raw), 4))
        for j, s in enumerate(raw):
            if not isinstance(s, list) or len(s) != 4 or not isinstance(s[3], bool):
                raise ScenarioFormatError(f"field {where}states[{j}] must be [x, y, heading, valid]")
            if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in s[:3]):
                raise ScenarioFormatError(f"field {where}states[{j}] must hold numbers")
            states[j] = (s[0], s[1], s[2], 1.0 if s[3] else 0.0)
        tracks.append(Track(aid, cat, rad, states))
    sc = Scenario(polylines, tracks, dt, hist, fut, name=name)
    return validate_scenario(sc)


def read_scenario(path) -> Scenario:
    with open(path, "rb") as fh:
        return load_scenario(fh.read(), name=str(path))


def write_scenario(sc: Scenario, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_scenario(sc))


# --- open-loop samples ------------------------------------------------------

@dataclass
class OpenLoopSample:
    """x = (s_{0:t}, c_0, n) read from ``scenario``; y = states (t, t + T_pred]."""

    scenario: Scenario
    agent_index: int
    agent_id: int
    start_time: float
    start_step: int
    target: np.ndarray  # (<=T_pred steps, 4), truncated at scenario end

    @property
    def input_states(self) -> np.ndarray:
        return self.scenario.tracks[self.agent_index].states[: self.start_step + 1]


def start_steps(sc: Scenario, tau: float = TAU) -> list:
    """Current-step indices of every prediction start time 0, tau, ..., end - tau."""
    k = int(round(tau / sc.dt))
    return list(range(sc.current_step, sc.num_steps - 1, k))


def check_horizon(t_pred: float, tau: float = TAU) -> int:
    r = t_pred / tau
    if t_pred <= 0 or abs(r - round(r)) > 1e-9:
        raise ValueError(f"T_pred={t_pred} is not a positive multiple of tau={tau}")
    return int(round(t_pred / 0.1))


def split_open_loop_samples(sc: Scenario, tau: float = TAU, t_pred: float = TAU) -> list:
    n_pred = check_horizon(t_pred, tau)
    out = []
    for ai, tr in enumerate(sc.tracks):
        for s in start_steps(sc, tau):
            target = tr.states[s + 1: s + 1 + n_pred]
            if not np.any(target[:, 3] > 0.5):
                continue
            out.append(OpenLoopSample(sc, ai, tr.agent_id, round((s - sc.current_step) * sc.dt, 6),
                                      s, target.copy()))
    return out
