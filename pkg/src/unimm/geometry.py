"""SE(2) frames, trajectory transforms and the trajectory distance used for matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DT = 0.1


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)


def steps_for(horizon: float, dt: float = DT) -> int:
    n = horizon / dt
    if horizon <= 0 or abs(n - round(n)) > 1e-6:
        raise ValueError(f"horizon {horizon} is not a positive multiple of {dt}")
    return int(round(n))


@dataclass(frozen=True)
class Pose2:
    x: float
    y: float
    heading: float

    def __post_init__(self):
        object.__setattr__(self, "heading", float(wrap_angle(self.heading)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading])

    @classmethod
    def from_state(cls, state) -> "Pose2":
        return cls(float(state[0]), float(state[1]), float(state[2]))


# Array-level transforms. ``states`` is (..., 3+) with columns x, y, heading[, valid];
# ``pose`` broadcasts against the leading dims as (..., 3). Written elementwise so that
# independent scalar references reproduce the results bit-for-bit.

def states_to_local(states, pose):
    states = np.asarray(states, dtype=float)
    pose = np.asarray(pose, dtype=float)
    px, py, ph = pose[..., 0:1], pose[..., 1:2], pose[..., 2:3]
    c, s = np.cos(ph), np.sin(ph)
    dx = states[..., 0] - px
    dy = states[..., 1] - py
    out = states.copy()
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = wrap_angle(states[..., 2] - ph)
    return out


def states_to_global(states, pose):
    states = np.asarray(states, dtype=float)
    pose = np.asarray(pose, dtype=float)
    px, py, ph = pose[..., 0:1], pose[..., 1:2], pose[..., 2:3]
    c, s = np.cos(ph), np.sin(ph)
    x, y = states[..., 0], states[..., 1]
    out = states.copy()
    out[..., 0] = c * x - s * y + px
    out[..., 1] = s * x + c * y + py
    out[..., 2] = wrap_angle(states[..., 2] + ph)
    return out


def relative_pose(frame, other):
    """Express pose(s) ``other`` in ``frame``; both (..., 3)."""
    return states_to_local(np.asarray(other)[..., None, :], np.asarray(frame))[..., 0, :]


def seqsum(a, axis=-1):
    """Left-to-right sum along ``axis`` (same rounding as a scalar loop)."""
    a = np.asarray(a)
    if a.shape[axis] == 0:
        return np.sum(a, axis=axis)
    return np.take(np.cumsum(a, axis=axis), -1, axis=axis)


def mean_displacement(a_xy, b_xy, valid, n_steps: int):
    """Mean Euclidean distance over the first ``n_steps`` where ``valid``.

    ``a_xy`` (..., T, 2) and ``b_xy`` broadcast; ``valid`` (..., T). Returns inf where
    no step is valid.
    """
    a_xy = np.asarray(a_xy, dtype=float)[..., :n_steps, :]
    b_xy = np.asarray(b_xy, dtype=float)[..., :n_steps, :]
    valid = np.asarray(valid, dtype=bool)[..., :n_steps]
    dx = a_xy[..., 0] - b_xy[..., 0]
    dy = a_xy[..., 1] - b_xy[..., 1]
    d = np.sqrt(dx * dx + dy * dy)
    d, valid = np.broadcast_arrays(d, valid)
    total = seqsum(np.where(valid, d, 0.0), axis=-1)
    count = valid.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(count > 0, total / np.maximum(count, 1), np.inf)
    return out


@dataclass
class TrajectorySegment:
    """States (T, 4) = x, y, heading, valid at 0.1 s spacing."""

    states: np.ndarray
    start_time: float = 0.0

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2 or self.states.shape[0] == 0:
            raise ValueError("segment needs a nonempty (T, 4) state array")
        if self.states.shape[1] == 3:
            self.states = np.concatenate([self.states, np.ones((len(self.states), 1))], axis=1)

    @property
    def xy(self):
        return self.states[:, :2]

    @property
    def valid(self):
        return self.states[:, 3] > 0.5


def to_local(seg: TrajectorySegment, frame: Pose2) -> TrajectorySegment:
    return TrajectorySegment(states_to_local(seg.states, frame.as_array()), seg.start_time)


def to_global(seg: TrajectorySegment, frame: Pose2) -> TrajectorySegment:
    return TrajectorySegment(states_to_global(seg.states, frame.as_array()), seg.start_time)


def traj_distance(a: TrajectorySegment, b: TrajectorySegment, horizon: float) -> float:
    """Mean position distance over shared valid steps within ``horizon`` (inf if none)."""
    n = steps_for(horizon)
    m = min(n, len(a.states), len(b.states))
    valid = a.valid[:m] & b.valid[:m]
    return float(mean_displacement(a.xy[:m], b.xy[:m], valid, m))
