"""Procedural driving scenes, degraded observations of them, and the fixed-size scene encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .geometry import rotate_points, wrap_angle

D_FEAT = 128
LANE_LENGTH = 100.0
LANE_SPACING = 0.5
MAX_OBS_ROTATION = math.pi / 6

# polar occupancy grid: 8 rings x 8 sectors
RING_EDGES = np.array([0.0, 3.0, 6.0, 10.0, 15.0, 20.0, 27.0, 34.0, 42.0])
N_SECTORS = 8
LANE_STATIONS = np.array([5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0])


@dataclass(frozen=True)
class Agent:
    position0: tuple[float, float]
    velocity: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not 0.3 <= self.radius <= 2.0:
            raise ValueError(f"agent radius {self.radius} outside [0.3, 2.0]")

    def to_json(self):
        return {"position0": list(self.position0), "velocity": list(self.velocity), "radius": self.radius}

    @classmethod
    def from_json(cls, d):
        return cls(tuple(d["position0"]), tuple(d["velocity"]), float(d["radius"]))


def agent_position(agent: Agent, t: float) -> tuple[float, float]:
    if t < 0:
        raise ValueError("t must be non-negative")
    return (agent.position0[0] + agent.velocity[0] * t, agent.position0[1] + agent.velocity[1] * t)


@dataclass(frozen=True)
class StopLine:
    position: float  # arc length along the centerline, meters
    light_state: str  # "green" | "red"

    def to_json(self):
        return {"position": self.position, "light_state": self.light_state}


@dataclass(frozen=True)
class Scene:
    seed: int
    centerline: np.ndarray
    lane_half_width: float = 2.0
    agents: tuple[Agent, ...] = ()
    stop_line: StopLine | None = None
    ego_speed: float = 0.0
    reference_progress: float = 0.0
    difficulty: str = "easy"
    # heading of the ego start pose; nonzero only after a frame rotation (rotate_scene)
    ego_heading: float = 0.0

    def __post_init__(self):
        cl = np.array(self.centerline, dtype=float)
        if cl.ndim != 2 or cl.shape[1] != 2 or len(cl) < 2:
            raise ValueError("centerline must be an (M>=2, 2) polyline")
        cl.setflags(write=False)
        object.__setattr__(self, "centerline", cl)
        object.__setattr__(self, "agents", tuple(self.agents))
        if self.reference_progress < 0:
            raise ValueError("reference_progress must be >= 0")

    @property
    def agent_arrays(self):
        """(A, 2) positions, (A, 2) velocities, (A,) radii."""
        if not self.agents:
            return np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)
        p = np.array([a.position0 for a in self.agents], dtype=float)
        v = np.array([a.velocity for a in self.agents], dtype=float)
        r = np.array([a.radius for a in self.agents], dtype=float)
        return p, v, r

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "difficulty": self.difficulty,
            "centerline": self.centerline.tolist(),
            "lane_half_width": self.lane_half_width,
            "agents": [a.to_json() for a in self.agents],
            "stop_line": self.stop_line.to_json() if self.stop_line else None,
            "ego_speed": self.ego_speed,
            "ego_heading": self.ego_heading,
            "reference_progress": self.reference_progress,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Scene":
        sl = d.get("stop_line")
        return cls(
            seed=int(d["seed"]),
            centerline=np.asarray(d["centerline"], dtype=float),
            lane_half_width=float(d["lane_half_width"]),
            agents=tuple(Agent.from_json(a) for a in d["agents"]),
            stop_line=StopLine(float(sl["position"]), sl["light_state"]) if sl else None,
            ego_speed=float(d["ego_speed"]),
            reference_progress=float(d["reference_progress"]),
            difficulty=d.get("difficulty", "easy"),
            ego_heading=float(d.get("ego_heading", 0.0)),
        )


# --- lane geometry -----------------------------------------------------------

def arc_centerline(curvature: float, length: float = LANE_LENGTH, spacing: float = LANE_SPACING):
    s = np.arange(0.0, length + 1e-9, spacing)
    if abs(curvature) < 1e-12:
        return np.stack([s, np.zeros_like(s)], axis=1)
    r = 1.0 / curvature
    return np.stack([r * np.sin(s * curvature), r * (1.0 - np.cos(s * curvature))], axis=1)


def polyline_arclength(poly: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(seg)])


def project_to_polyline(poly: np.ndarray, points: np.ndarray):
    """Project points onto a polyline.

    Returns (arc length of the foot point, signed lateral offset; left positive).
    Works for points of shape (..., 2).
    """
    pts = np.asarray(points, dtype=float)
    shape = pts.shape[:-1]
    p = pts.reshape(-1, 2)
    a = poly[:-1]
    ab = poly[1:] - a
    seg_len2 = np.einsum("ij,ij->i", ab, ab)
    cum = polyline_arclength(poly)
    best_d2 = np.full(len(p), np.inf)
    best_s = np.zeros(len(p))
    best_lat = np.zeros(len(p))
    # chunked over points to bound memory
    for lo in range(0, len(p), 2048):
        q = p[lo:lo + 2048]
        ap = q[:, None, :] - a[None, :, :]
        t = np.clip(np.einsum("psk,sk->ps", ap, ab) / seg_len2, 0.0, 1.0)
        foot = a[None] + t[..., None] * ab[None]
        diff = q[:, None, :] - foot
        d2 = np.einsum("psk,psk->ps", diff, diff)
        j = np.argmin(d2, axis=1)
        rows = np.arange(len(q))
        seg_l = np.sqrt(seg_len2[j])
        best_d2[lo:lo + 2048] = d2[rows, j]
        best_s[lo:lo + 2048] = cum[j] + t[rows, j] * seg_l
        cross = ab[j, 0] * diff[rows, j, 1] - ab[j, 1] * diff[rows, j, 0]
        best_lat[lo:lo + 2048] = np.sign(cross) * np.sqrt(d2[rows, j])
    return best_s.reshape(shape), best_lat.reshape(shape)


def point_on_polyline(poly: np.ndarray, s):
    """Position and tangent heading at arc lengths ``s`` (clamped to the polyline)."""
    cum = polyline_arclength(poly)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    j = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(poly) - 2)
    seg = poly[j + 1] - poly[j]
    seg_l = cum[j + 1] - cum[j]
    frac = (s - cum[j]) / np.where(seg_l > 0, seg_l, 1.0)
    xy = poly[j] + frac[..., None] * seg
    heading = np.arctan2(seg[..., 1], seg[..., 0])
    return xy, heading


# --- scene generation --------------------------------------------------------

_DIFFICULTY = {
    "easy": {"kmax": 0.05, "agents": (0, 3)},
    "hard": {"kmax": 0.12, "agents": (2, 6)},
}


def _lane_frame(cl, s):
    xy, h = point_on_polyline(cl, s)
    normal = np.array([-math.sin(float(h)), math.cos(float(h))])
    tangent = np.array([math.cos(float(h)), math.sin(float(h))])
    return np.asarray(xy, dtype=float), tangent, normal


def _draw_agent(rng, cl, kind, ego_speed):
    if kind == "lead":
        s, lat = rng.uniform(10.0, 40.0), rng.uniform(-0.6, 0.6)
        speed, radius = rng.uniform(0.0, 0.8 * ego_speed), rng.uniform(1.0, 1.6)
        heading_sign = 1.0
    elif kind == "parked":
        s, lat = rng.uniform(8.0, 40.0), rng.choice([-1.0, 1.0]) * rng.uniform(1.6, 3.5)
        speed, radius = 0.0, rng.uniform(0.8, 1.5)
        heading_sign = 1.0
    elif kind == "oncoming":
        s, lat = rng.uniform(25.0, 40.0), rng.uniform(3.8, 5.0)
        speed, radius = rng.uniform(3.0, 9.0), rng.uniform(1.0, 1.5)
        heading_sign = -1.0
    else:  # crossing pedestrian
        s, lat = rng.uniform(12.0, 35.0), rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 6.0)
        speed, radius = rng.uniform(0.8, 1.8), rng.uniform(0.3, 0.5)
        heading_sign = 0.0
    xy, tangent, normal = _lane_frame(cl, s)
    pos = xy + lat * normal
    if kind == "crossing":
        vel = -np.sign(lat) * speed * normal
    else:
        vel = heading_sign * speed * tangent
    return Agent((float(pos[0]), float(pos[1])), (float(vel[0]), float(vel[1])), float(radius))


def _clear_of_start(agent: Agent, horizon=4.0, margin=1.5):
    # agents must never reach a stationary ego at the origin
    t = np.linspace(0.0, horizon, 81)
    p = np.asarray(agent.position0)[None] + t[:, None] * np.asarray(agent.velocity)[None]
    return bool(np.min(np.linalg.norm(p, axis=1)) > agent.radius + 1.0 + margin)


def generate_scene(seed: int, difficulty: str = "easy", reference=True) -> Scene:
    """Deterministic scene from (seed, difficulty)."""
    if difficulty not in _DIFFICULTY:
        raise ValueError(f"unknown difficulty {difficulty!r}")
    cfg = _DIFFICULTY[difficulty]
    rng = np.random.default_rng([int(seed), 0 if difficulty == "easy" else 1])
    kappa = 0.0 if rng.random() < 0.3 else float(rng.uniform(-cfg["kmax"], cfg["kmax"]))
    cl = arc_centerline(kappa)
    ego_speed = float(rng.uniform(2.0, 12.0))

    lo, hi = cfg["agents"]
    n_agents = int(rng.integers(lo, hi + 1))
    kinds = list(rng.choice(["lead", "parked", "oncoming", "crossing"], size=n_agents,
                            p=[0.35, 0.3, 0.15, 0.2]))
    if difficulty == "hard" and n_agents and not any(k in ("lead", "parked") for k in kinds):
        kinds[0] = "lead"
    agents = []
    for kind in kinds:
        for _ in range(20):
            a = _draw_agent(rng, cl, kind, ego_speed)
            if _clear_of_start(a):
                agents.append(a)
                break

    stop = None
    if rng.random() < 0.3:
        stop = StopLine(float(rng.uniform(10.0, 50.0)), "red" if rng.random() < 0.5 else "green")

    scene = Scene(seed=int(seed), centerline=cl, agents=tuple(agents), stop_line=stop,
                  ego_speed=ego_speed, difficulty=difficulty)
    if reference:
        from .metrics import reference_progress
        scene = replace(scene, reference_progress=reference_progress(scene))
    return scene


def rotate_scene(scene: Scene, angle: float) -> Scene:
    """Change of coordinates: rotate all geometry and the ego start pose about the origin."""
    return replace(
        _rotate_world(scene, angle),
        ego_heading=float(wrap_angle(scene.ego_heading + angle)),
    )


def _rotate_world(scene: Scene, angle: float) -> Scene:
    agents = []
    for a in scene.agents:
        p = rotate_points(np.asarray(a.position0), angle)
        v = rotate_points(np.asarray(a.velocity), angle)
        agents.append(Agent((float(p[0]), float(p[1])), (float(v[0]), float(v[1])), a.radius))
    return replace(scene, centerline=rotate_points(scene.centerline, angle), agents=tuple(agents))


def pose_perturbed_scene(scene: Scene, angle: float) -> Scene:
    """Ground truth for a viewpoint change: the world turns by ``angle`` while the ego keeps
    its own start pose, so the ego now starts misaligned with its lane."""
    from .metrics import reference_progress
    turned = _rotate_world(scene, angle)
    return replace(turned, reference_progress=reference_progress(turned))


# --- observations ------------------------------------------------------------

@dataclass(frozen=True)
class ObservedScene:
    base: Scene
    rotation: float = 0.0
    noise_sigma: float = 0.0
    dropout_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not -MAX_OBS_ROTATION <= self.rotation <= MAX_OBS_ROTATION:
            raise ValueError(f"rotation {self.rotation:.4f} outside [-pi/6, pi/6]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.dropout_frac < 1.0:
            raise ValueError("dropout_frac must be in [0, 1)")

    def truth(self) -> Scene:
        """Scene the observation depicts; sensor noise and dropout never change it."""
        if self.rotation == 0.0:
            return self.base
        return pose_perturbed_scene(self.base, self.rotation)


def perturb_scene(scene: Scene, rotation: float = 0.0, noise_sigma: float = 0.0,
                  dropout_frac: float = 0.0, seed: int = 0) -> ObservedScene:
    return ObservedScene(scene, float(rotation), float(noise_sigma), float(dropout_frac), int(seed))


def _polar_grid(points: np.ndarray, weights=None) -> np.ndarray:
    grid = np.zeros((len(RING_EDGES) - 1, N_SECTORS))
    if len(points) == 0:
        return grid.ravel()
    r = np.hypot(points[:, 0], points[:, 1])
    phi = np.arctan2(points[:, 1], points[:, 0])
    ring = np.searchsorted(RING_EDGES, r, side="right") - 1
    sector = np.clip(((phi + np.pi) / (2 * np.pi) * N_SECTORS).astype(int), 0, N_SECTORS - 1)
    ok = (ring >= 0) & (ring < len(RING_EDGES) - 1)
    w = np.ones(len(points)) if weights is None else weights
    np.add.at(grid, (ring[ok], sector[ok]), w[ok])
    return grid.ravel()


def encode_scene(obs: ObservedScene, d_feat: int = D_FEAT) -> np.ndarray:
    """Fixed-length feature vector of an observation.

    Layout: lane block (17), ego speed (1), stop line (3), current agent grid (64),
    one-second-ahead agent grid (64); truncated or zero-padded to ``d_feat``.
    Rings run inner to outer, so truncation drops the far cells of the future grid first.
    """
    scene = obs.base
    rng = np.random.default_rng([obs.seed, 0x5EED])
    cl = rotate_points(scene.centerline, obs.rotation)
    p, v, r = scene.agent_arrays
    now = rotate_points(p, obs.rotation) if len(p) else p
    ahead = rotate_points(p + v, obs.rotation) if len(p) else p
    if obs.noise_sigma > 0:
        cl = cl + rng.normal(0.0, obs.noise_sigma, size=cl.shape)
        now = now + rng.normal(0.0, obs.noise_sigma, size=now.shape)
        ahead = ahead + rng.normal(0.0, obs.noise_sigma, size=ahead.shape)

    xy, _ = point_on_polyline(cl, LANE_STATIONS)
    xy_prev, _ = point_on_polyline(cl, LANE_STATIONS - 1.0)
    xy_next, _ = point_on_polyline(cl, LANE_STATIONS + 1.0)
    tang = np.arctan2(xy_next[:, 1] - xy_prev[:, 1], xy_next[:, 0] - xy_prev[:, 0])
    curv = (tang[-1] - tang[0]) / (LANE_STATIONS[-1] - LANE_STATIONS[0])
    lane = np.concatenate([xy[:, 1] / 10.0, tang, [curv * 10.0]])

    stop = np.zeros(3)
    if scene.stop_line is not None:
        stop[0] = scene.stop_line.position / 50.0
        stop[1] = scene.stop_line.light_state == "red"
        stop[2] = scene.stop_line.light_state == "green"

    feats = np.concatenate([lane, [scene.ego_speed / 10.0], stop, _polar_grid(now), _polar_grid(ahead)])
    if len(feats) >= d_feat:
        feats = feats[:d_feat].copy()
    else:
        feats = np.concatenate([feats, np.zeros(d_feat - len(feats))])
    if obs.dropout_frac > 0:
        n_drop = int(round(obs.dropout_frac * d_feat))
        feats[rng.choice(d_feat, size=n_drop, replace=False)] = 0.0
    return feats
