"""Trajectory value type, first-order delta encoding, kinematic sampling and rigid transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

T_WP = 8
DT = 0.5


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    out = np.pi - np.mod(np.pi - a, 2.0 * np.pi)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Trajectory:
    """Fixed-length sequence of (x, y, heading) waypoints.

    The start pose (origin, heading 0 in the ego frame) is implicit and not stored.
    """

    waypoints: np.ndarray
    dt: float = DT
    frame: str = "ego"

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 3:
            raise ValueError(f"waypoints must have shape (T, 3), got {wp.shape}")
        if not np.all(np.isfinite(wp)):
            raise ValueError("waypoints must be finite")
        if self.frame not in ("ego", "world"):
            raise ValueError(f"unknown frame {self.frame!r}")
        wp[:, 2] = wrap_angle(wp[:, 2])
        wp.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)

    def __len__(self):
        return len(self.waypoints)

    @property
    def xy(self) -> np.ndarray:
        return self.waypoints[:, :2]

    @property
    def heading(self) -> np.ndarray:
        return self.waypoints[:, 2]

    def to_json(self) -> dict:
        return {"waypoints": self.waypoints.tolist(), "dt": self.dt, "frame": self.frame}

    @classmethod
    def from_json(cls, d: dict) -> "Trajectory":
        return cls(np.asarray(d["waypoints"], dtype=float), dt=float(d.get("dt", DT)),
                   frame=d.get("frame", "ego"))

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.dt == other.dt and self.frame == other.frame
                and np.array_equal(self.waypoints, other.waypoints))

    __hash__ = None


@dataclass(frozen=True)
class DeltaSequence:
    """Per-step (dx, dy, dheading) increments; deltas[0] is measured from the origin."""

    deltas: np.ndarray
    dt: float = DT

    def __post_init__(self):
        d = np.array(self.deltas, dtype=float)
        if d.ndim != 2 or d.shape[1] != 3:
            raise ValueError(f"deltas must have shape (T, 3), got {d.shape}")
        d[:, 2] = wrap_angle(d[:, 2])
        d.setflags(write=False)
        object.__setattr__(self, "deltas", d)


def diff_normalize(traj: Trajectory) -> DeltaSequence:
    if traj.frame != "ego":
        raise ValueError("diff_normalize expects an ego-frame trajectory")
    return DeltaSequence(diff_array(traj.waypoints), dt=traj.dt)


def integrate_deltas(deltas: DeltaSequence) -> Trajectory:
    return Trajectory(integrate_array(deltas.deltas), dt=deltas.dt)


def diff_array(wp: np.ndarray) -> np.ndarray:
    """Batched delta encoding over the waypoint axis (``-2``); works on (..., T, 3)."""
    wp = np.asarray(wp, dtype=float)
    prev = np.zeros_like(wp)
    prev[..., 1:, :] = wp[..., :-1, :]
    d = wp - prev
    d[..., 2] = wrap_angle(d[..., 2])
    return d


def integrate_array(d: np.ndarray) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    wp = np.cumsum(d, axis=-2)
    wp[..., 2] = wrap_angle(wp[..., 2])
    return wp


@dataclass(frozen=True)
class ControlSpec:
    """Bounds for piecewise-constant (speed, curvature) controls."""

    speed: tuple[float, float] = (0.0, 15.0)
    curvature: tuple[float, float] = (-0.2, 0.2)
    n_segments: int = 2
    # exponent > 1 concentrates curvature draws near zero while keeping the bounds
    curvature_power: float = 2.0
    n_steps: int = T_WP
    dt: float = DT

    def validate(self):
        vals = [*self.speed, *self.curvature, self.curvature_power, self.dt]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("control bounds must be finite")
        if self.speed[0] < 0 or self.speed[0] > self.speed[1]:
            raise ValueError(f"bad speed bounds {self.speed}")
        if self.curvature[0] > self.curvature[1]:
            raise ValueError(f"bad curvature bounds {self.curvature}")
        if self.n_segments < 1 or self.n_steps < 1:
            raise ValueError("need at least one segment and one step")


def rollout_unicycle(speeds, curvatures, dt: float = DT, heading0: float = 0.0) -> np.ndarray:
    """Roll out per-step speeds/curvatures with exact arc geometry.

    Each step turns by ``curvature * speed * dt``; the position moves along the
    chord of that arc, so step length never exceeds ``speed * dt``.
    Accepts (..., T) arrays and returns (..., T, 3).
    """
    v = np.asarray(speeds, dtype=float)
    k = np.asarray(curvatures, dtype=float)
    v, k = np.broadcast_arrays(v, k)
    arc = v * dt
    dh = k * arc
    h_after = heading0 + np.cumsum(dh, axis=-1)
    h_before = h_after - dh
    chord = arc * np.sinc(dh / (2.0 * np.pi))
    mid = h_before + 0.5 * dh
    x = np.cumsum(chord * np.cos(mid), axis=-1)
    y = np.cumsum(chord * np.sin(mid), axis=-1)
    return np.stack([x, y, wrap_angle(h_after)], axis=-1)


def sample_controls(rng: np.random.Generator, spec: ControlSpec, n: int | None = None):
    """Draw per-step speed/curvature arrays for ``n`` trajectories (or one if None)."""
    spec.validate()
    m = 1 if n is None else n
    seg = spec.n_segments
    speeds = rng.uniform(spec.speed[0], spec.speed[1], size=(m, seg))
    u = rng.uniform(-1.0, 1.0, size=(m, seg))
    lo, hi = spec.curvature
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    curv = mid + half * np.sign(u) * np.abs(u) ** spec.curvature_power
    # segment boundaries: sorted distinct switch steps in [1, T-1]
    steps = np.arange(spec.n_steps)
    seg_idx = np.zeros((m, spec.n_steps), dtype=int)
    if seg > 1 and spec.n_steps > 1:
        for i in range(m):
            cuts = np.sort(rng.choice(np.arange(1, spec.n_steps), size=min(seg - 1, spec.n_steps - 1),
                                      replace=False))
            seg_idx[i] = np.searchsorted(cuts, steps, side="right")
    v = np.take_along_axis(speeds, seg_idx, axis=1)
    k = np.take_along_axis(curv, seg_idx, axis=1)
    if n is None:
        return v[0], k[0]
    return v, k


def sample_kinematic(seed, controls: ControlSpec | None = None) -> Trajectory:
    controls = controls or ControlSpec()
    rng = np.random.default_rng(seed)
    v, k = sample_controls(rng, controls)
    return Trajectory(rollout_unicycle(v, k, controls.dt), dt=controls.dt)


def sample_kinematic_batch(rng: np.random.Generator, n: int,
                           controls: ControlSpec | None = None) -> np.ndarray:
    controls = controls or ControlSpec()
    v, k = sample_controls(rng, controls, n)
    return rollout_unicycle(v, k, controls.dt)


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate_points(xy, angle: float) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    return xy @ rotation_matrix(angle).T


def rotate_array(wp: np.ndarray, angle: float) -> np.ndarray:
    wp = np.asarray(wp, dtype=float)
    out = np.empty_like(wp)
    out[..., :2] = rotate_points(wp[..., :2], angle)
    out[..., 2] = wrap_angle(wp[..., 2] + angle)
    return out


def rotate_traj(traj: Trajectory, angle: float) -> Trajectory:
    if traj.frame != "ego":
        raise ValueError("rotate_traj expects an ego-frame trajectory")
    return Trajectory(rotate_array(traj.waypoints, angle), dt=traj.dt)


def traj_distance(a: Trajectory, b: Trajectory) -> float:
    """Mean Euclidean distance between corresponding (x, y) waypoints."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if a.frame != b.frame:
        raise ValueError("frame mismatch")
    return float(np.mean(np.linalg.norm(a.xy - b.xy, axis=-1)))


def pairwise_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """traj_distance broadcast over leading axes of (..., T, 2+) arrays."""
    return np.linalg.norm(a[..., :2] - b[..., :2], axis=-1).mean(axis=-1)
