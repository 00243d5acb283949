"""Rule-based per-trajectory sub-metrics, EPDMS aggregation, oracle planner and two-stage scoring."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import DT, T_WP, Trajectory, wrap_angle
from .world import Scene, point_on_polyline, project_to_polyline

METRIC_NAMES = ("nc", "dac", "ddc", "tlc", "ep", "ttc", "lk", "hc", "ec")
GATES = ("nc", "dac", "ddc", "tlc")
BINARY = ("nc", "dac", "ddc", "tlc", "ttc", "lk")


@dataclass(frozen=True)
class MetricConfig:
    """Every constant of the rule-based scorer in one swappable record."""

    ego_radius: float = 1.0
    substeps: int = 10
    ddc_tolerance: float = 0.1
    lk_margin: float = 0.5
    ttc_horizon: float = 1.0
    max_accel: float = 3.0
    max_jerk: float = 5.0
    max_yaw_rate: float = 0.6
    max_yaw_accel: float = 1.5
    min_reference_progress: float = 0.1
    weights: dict = field(default_factory=lambda: {"ep": 5.0, "ttc": 5.0, "lk": 2.0, "hc": 2.0, "ec": 2.0})
    gates: tuple = GATES


DEFAULT_METRICS = MetricConfig()


@dataclass(frozen=True)
class SubScores:
    nc: float
    dac: float
    ddc: float
    tlc: float
    ep: float
    ttc: float
    lk: float
    hc: float
    ec: float

    def __post_init__(self):
        for name in METRIC_NAMES:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
            if name in BINARY and v not in (0.0, 1.0):
                raise ValueError(f"{name} must be binary, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in METRIC_NAMES], dtype=float)

    @classmethod
    def from_array(cls, a) -> "SubScores":
        return cls(*(float(x) for x in a))

    def to_json(self):
        return asdict(self)


# --- swept-disc collision primitives ----------------------------------------

def _min_dist_linear(rel0, rel_vel, duration):
    """Minimum of |rel0 + rel_vel * tau| for tau in [0, duration] (broadcast over leading axes)."""
    vv = np.einsum("...k,...k->...", rel_vel, rel_vel)
    pv = np.einsum("...k,...k->...", rel0, rel_vel)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(vv > 1e-15, -pv / vv, 0.0)
    tau = np.clip(tau, 0.0, duration)
    closest = rel0 + tau[..., None] * rel_vel
    return np.sqrt(np.einsum("...k,...k->...", closest, closest))


def _ego_path(wp: np.ndarray, dt: float, substeps: int):
    """Sub-step times and ego positions, linearly interpolated from the origin through each waypoint."""
    n, t = wp.shape[:2]
    pts = np.concatenate([np.zeros((n, 1, 2)), wp[..., :2]], axis=1)
    frac = np.arange(substeps) / substeps
    seg = pts[:, :-1, None, :] + frac[None, None, :, None] * (pts[:, 1:, None, :] - pts[:, :-1, None, :])
    pos = np.concatenate([seg.reshape(n, t * substeps, 2), pts[:, -1:, :]], axis=1)
    times = np.arange(t * substeps + 1) * (dt / substeps)
    vel = (pts[:, 1:] - pts[:, :-1]) / dt
    return times, pos, vel


def collision_flags(scene: Scene, wp: np.ndarray, dt: float = DT, cfg: MetricConfig = DEFAULT_METRICS):
    """Return (collides, ttc_violation) boolean arrays of shape (N,).

    Sub-step samples come from linear interpolation between waypoints; each sub-interval is
    swept analytically (both discs move linearly inside it), so no graze between samples is missed.
    """
    wp = np.asarray(wp, dtype=float)
    n, t = wp.shape[:2]
    ap, av, ar = scene.agent_arrays
    if len(ar) == 0:
        return np.zeros(n, bool), np.zeros(n, bool)
    s = cfg.substeps
    times, pos, seg_vel = _ego_path(wp, dt, s)
    h = dt / s
    reach = cfg.ego_radius + ar  # (A,)

    # NC: every sub-interval [times[j], times[j+1]]
    agent_at = ap[None, :, :] + times[:, None, None] * av[None, :, :]  # (J+1, A, 2)
    rel0 = agent_at[None, :-1] - pos[:, :-1, None, :]  # (N, J, A, 2)
    ego_v = np.repeat(seg_vel, s, axis=1)  # (N, J, 2)
    rel_v = av[None, None, :, :] - ego_v[:, :, None, :]
    dmin = _min_dist_linear(rel0, rel_v, h)
    collides = np.any(dmin < reach, axis=(1, 2))

    # TTC: from each sub-step start, both move at constant velocity for the horizon. Starts within
    # one waypoint interval share the ego line, so their windows merge into one sweep per interval.
    starts = np.arange(t) * dt
    last_start = starts + (s - 1) * h
    last_start[-1] = t * dt
    duration = last_start - starts + cfg.ttc_horizon  # (T,)
    seg_start = np.concatenate([np.zeros((n, 1, 2)), wp[:, :-1, :2]], axis=1)  # (N, T, 2)
    agent_seg = ap[None, :, :] + starts[:, None, None] * av[None, :, :]  # (T, A, 2)
    rel0 = agent_seg[None] - seg_start[:, :, None, :]
    rel_v = av[None, None] - seg_vel[:, :, None, :]
    dmin = _min_dist_linear(rel0, rel_v, duration[None, :, None])
    ttc_bad = np.any(dmin < reach, axis=(1, 2))
    return collides, ttc_bad


# --- metric evaluation -------------------------------------------------------

def progress_along(scene: Scene, wp: np.ndarray):
    """Arc-length station and lateral offset of every waypoint, (N, T) each."""
    return project_to_polyline(scene.centerline, np.asarray(wp)[..., :2])


def evaluate_batch(scene: Scene, wp: np.ndarray, dt: float = DT,
                   cfg: MetricConfig = DEFAULT_METRICS) -> np.ndarray:
    """Sub-metrics for a stack of candidates, (N, T, 3) -> (N, 9) in METRIC_NAMES order."""
    wp = np.asarray(wp, dtype=float)
    if wp.ndim != 3 or wp.shape[1:] != (T_WP, 3):
        raise ValueError(f"candidates must have shape (N, {T_WP}, 3), got {wp.shape}")
    n = len(wp)
    out = np.zeros((n, len(METRIC_NAMES)))
    if n == 0:
        return out
    collides, ttc_bad = collision_flags(scene, wp, dt, cfg)
    s, lat = progress_along(scene, wp)
    s_prev = np.concatenate([np.zeros((n, 1)), s[:, :-1]], axis=1)
    off = np.abs(lat)

    nc = ~collides
    dac = np.all(off <= scene.lane_half_width, axis=1)
    ddc = np.all(s - s_prev >= -cfg.ddc_tolerance, axis=1)
    tlc = np.ones(n, bool)
    if scene.stop_line is not None and scene.stop_line.light_state == "red":
        tlc = ~np.any(s > scene.stop_line.position, axis=1)
    ref = max(scene.reference_progress, cfg.min_reference_progress)
    ep = np.clip(s[:, -1] / ref, 0.0, 1.0)
    ttc = ~ttc_bad
    lk = np.all(off <= scene.lane_half_width - cfg.lk_margin, axis=1)

    # comfort: derivatives before the first step are extrapolated from the first step
    pts = np.concatenate([np.zeros((n, 1, 2)), wp[..., :2]], axis=1)
    speed = np.concatenate([np.full((n, 1), scene.ego_speed),
                            np.linalg.norm(np.diff(pts, axis=1), axis=-1) / dt], axis=1)
    acc = np.diff(speed, axis=1) / dt
    jerk = np.diff(np.concatenate([acc[:, :1], acc], axis=1), axis=1) / dt
    hc = np.mean((np.abs(acc) <= cfg.max_accel) & (np.abs(jerk) <= cfg.max_jerk), axis=1)

    head = np.concatenate([np.full((n, 1), scene.ego_heading), wp[..., 2]], axis=1)
    yaw_rate = wrap_angle(np.diff(head, axis=1)) / dt
    yaw_acc = np.diff(np.concatenate([yaw_rate[:, :1], yaw_rate], axis=1), axis=1) / dt
    ec = np.mean((np.abs(yaw_rate) <= cfg.max_yaw_rate) & (np.abs(yaw_acc) <= cfg.max_yaw_accel), axis=1)

    for i, col in enumerate((nc, dac, ddc, tlc, ep, ttc, lk, hc, ec)):
        out[:, i] = col
    return out


def evaluate_metrics(scene: Scene, traj: Trajectory, cfg: MetricConfig = DEFAULT_METRICS) -> SubScores:
    if len(traj) != T_WP:
        raise ValueError(f"trajectory has {len(traj)} waypoints, expected {T_WP}")
    return SubScores.from_array(evaluate_batch(scene, traj.waypoints[None], traj.dt, cfg)[0])


def aggregate_epdms(s, cfg: MetricConfig = DEFAULT_METRICS):
    """EPDMS in [0, 100] from SubScores or an (..., 9) array of sub-metrics."""
    arr = s.as_array() if isinstance(s, SubScores) else np.asarray(s, dtype=float)
    idx = {n: i for i, n in enumerate(METRIC_NAMES)}
    gate = np.prod([arr[..., idx[g]] for g in cfg.gates], axis=0)
    total = sum(cfg.weights.values())
    soft = sum(w * arr[..., idx[n]] for n, w in cfg.weights.items()) / total
    score = 100.0 * gate * soft
    return float(score) if np.ndim(score) == 0 else score


def two_stage_score(stage1, stage2):
    """(mean stage-1, mean stage-2, mean of per-scene products / 100)."""
    s1 = np.asarray(stage1, dtype=float)
    s2 = np.asarray(stage2, dtype=float)
    if s1.shape != s2.shape:
        raise ValueError(f"stage lists differ in length: {s1.shape} vs {s2.shape}")
    if s1.size == 0:
        raise ValueError("no scenes to score")
    return float(s1.mean()), float(s2.mean()), float(np.mean(s1 * s2 / 100.0))


# --- oracle planner ----------------------------------------------------------

def oracle_index(scene: Scene, candidates: np.ndarray, dt: float = DT,
                 cfg: MetricConfig = DEFAULT_METRICS) -> int:
    cands = np.asarray(candidates)
    if len(cands) == 0:
        raise ValueError("empty candidate set")
    scores = aggregate_epdms(evaluate_batch(scene, cands, dt, cfg), cfg)
    return int(np.argmax(scores))  # argmax returns the first maximum


def plan_pdm_oracle(scene: Scene, candidates, cfg: MetricConfig = DEFAULT_METRICS) -> Trajectory:
    """Best candidate by ground-truth EPDMS; ties go to the lowest index."""
    wp = candidates.trajectories if hasattr(candidates, "trajectories") else np.asarray(candidates)
    dt = getattr(candidates, "dt", DT)
    return Trajectory(wp[oracle_index(scene, wp, dt, cfg)], dt=dt)


def lane_following_proposals(scene: Scene, speeds=np.arange(0.0, 15.5, 1.0),
                             accels=(3.0, 6.0), dt: float = DT) -> np.ndarray:
    """Centerline-following candidates at a range of target speeds (accel-limited from ego speed)."""
    profiles = []
    t = np.arange(1, T_WP + 1) * dt
    for a in accels:
        for target in speeds:
            fine = np.linspace(0.0, t[-1], 401)
            v = np.where(target >= scene.ego_speed,
                         np.minimum(target, scene.ego_speed + a * fine),
                         np.maximum(target, scene.ego_speed - a * fine))
            dist = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * np.diff(fine))])
            profiles.append(np.interp(t, fine, dist))
    s = np.array(profiles)
    xy, heading = point_on_polyline(scene.centerline, s)
    return np.concatenate([xy, heading[..., None]], axis=-1)


def reference_progress(scene: Scene, cfg: MetricConfig = DEFAULT_METRICS) -> float:
    """Progress of the best lane-following driver that passes every gate and TTC.

    Progress is scene-intrinsic, so EP is computed against this value for any candidate set.
    """
    props = lane_following_proposals(scene)
    m = evaluate_batch(scene, props, DT, cfg)
    idx = {n: i for i, n in enumerate(METRIC_NAMES)}
    gates = np.all(m[:, [idx[g] for g in cfg.gates]] == 1.0, axis=1)
    s, _ = progress_along(scene, props)
    final = s[:, -1]
    for mask in (gates & (m[:, idx["ttc"]] == 1.0), gates):
        if mask.any():
            return float(max(final[mask].max(), 0.0))
    return 0.0
