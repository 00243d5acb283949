"""DDPM trajectory generator over standardized first-order waypoint deltas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import T_WP, diff_array, integrate_array, wrap_angle
from .nn import MLP, AdamState, ParamStore, adam_step, backward, mlp_forward
from .vocab import Vocabulary

X_DIM = 3 * T_WP
T_EMB = 16


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if b.ndim != 1 or len(b) < 1 or np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must be a non-empty vector in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """alpha_bar at 1-based step(s) t."""
        return self.alpha_bars[np.asarray(t) - 1]


def make_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    return NoiseSchedule(np.linspace(beta_min, beta_max, T))


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """Forward diffusion: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with t in [1, T]."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bar(t_arr)
    if np.ndim(ab):
        ab = ab[..., None]
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(eps)


def timestep_embedding(t, dim: int = T_EMB, max_period: float = 1000.0):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class GeneratorModel:
    params: ParamStore
    net: MLP
    schedule: NoiseSchedule
    mean: np.ndarray = field(default_factory=lambda: np.zeros(X_DIM))
    std: np.ndarray = field(default_factory=lambda: np.ones(X_DIM))
    adam: AdamState = field(default_factory=AdamState)

    @classmethod
    def create(cls, d_feat: int, seed: int, hidden: int = 256, schedule: NoiseSchedule | None = None,
               lr: float = 2e-4):
        rng = np.random.default_rng([int(seed), 0xD1F])
        net = MLP("den", (X_DIM + T_EMB + d_feat, hidden, hidden, X_DIM), "relu")
        params = ParamStore(seed)
        net.init(params, rng)
        # zero-initialised output layer: an untrained denoiser predicts eps = 0
        last = f"den.{net.n_layers - 1}"
        params.arrays[last + ".W"][:] = 0.0
        return cls(params, net, schedule or make_schedule(), adam=AdamState(lr=lr))

    @property
    def d_feat(self):
        return self.net.sizes[0] - X_DIM - T_EMB

    def fit_normalization(self, gt_waypoints: np.ndarray):
        d = diff_array(gt_waypoints).reshape(len(gt_waypoints), -1)
        self.mean = d.mean(axis=0)
        self.std = np.maximum(d.std(axis=0), 1e-2)

    def standardize(self, wp):
        d = diff_array(wp).reshape(len(wp), -1)
        return (d - self.mean) / self.std

    def to_waypoints(self, x):
        d = (np.asarray(x) * self.std + self.mean).reshape(len(x), T_WP, 3)
        d[..., 2] = wrap_angle(d[..., 2])
        return integrate_array(d)

    def to_json(self):
        return {"params": self.params.to_json(), "sizes": list(self.net.sizes),
                "activation": self.net.activation, "betas": self.schedule.betas.tolist(),
                "mean": self.mean.tolist(), "std": self.std.tolist(), "adam": self.adam.to_json()}

    @classmethod
    def from_json(cls, d):
        params = ParamStore.from_json(d["params"])
        net = MLP("den", tuple(d["sizes"]), d["activation"])
        return cls(params, net, NoiseSchedule(np.asarray(d["betas"])), np.asarray(d["mean"]),
                   np.asarray(d["std"]), AdamState.from_json(d["adam"], params))


def denoise(model: GeneratorModel, x_t, t, features):
    x_t = np.atleast_2d(x_t)
    feats = np.atleast_2d(features)
    if feats.shape[-1] != model.d_feat:
        raise ValueError(f"feature dimension {feats.shape[-1]} != {model.d_feat}")
    if len(feats) == 1 and len(x_t) > 1:
        feats = np.repeat(feats, len(x_t), axis=0)
    t_emb = timestep_embedding(np.broadcast_to(np.asarray(t), (len(x_t),)))
    inp = np.concatenate([x_t, t_emb, feats], axis=1)
    return mlp_forward(model.params, inp, model.net)


def generator_loss(model: GeneratorModel, features, gt_waypoints, rng: np.random.Generator):
    """Epsilon-prediction MSE on a batch; returns (loss, grads)."""
    gt = np.asarray(gt_waypoints, dtype=float).reshape(-1, T_WP, 3)
    feats = np.atleast_2d(features)
    x0 = model.standardize(gt)
    b = len(x0)
    t = rng.integers(1, model.schedule.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    x_t = q_sample(x0, t, eps, model.schedule)
    pred, cache = denoise(model, x_t, t, feats)
    resid = pred - eps
    loss = float(np.mean(resid ** 2))
    if not math.isfinite(loss):
        raise FloatingPointError("non-finite generator loss")
    grads, _ = backward(cache, 2.0 * resid / resid.size)
    return loss, grads


def train_step_generator(model: GeneratorModel, features, gt_waypoints, rng: np.random.Generator) -> float:
    loss, grads = generator_loss(model, features, gt_waypoints, rng)
    adam_step(model.params, grads, model.adam)
    return loss


def _chain_noise(seed, n, steps):
    # one independent stream per chain so n chains equal n single-chain draws
    return np.stack([np.random.default_rng([*np.atleast_1d(seed).tolist(), i]).standard_normal((steps + 1, X_DIM))
                     for i in range(n)])


def sample_proposals(model: GeneratorModel, features, n: int = 100, seed=0) -> Vocabulary:
    """Ancestral DDPM sampling of ``n`` independent chains; returns a DP-tagged vocabulary."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sch = model.schedule
    noise = _chain_noise(seed, n, sch.T)
    x = noise[:, 0]
    betas, alphas, abars = sch.betas, sch.alphas, sch.alpha_bars
    feats = np.repeat(np.atleast_2d(features), n, axis=0)
    for t in range(sch.T, 0, -1):
        eps_hat, _ = denoise(model, x, t, feats)
        mean = (x - betas[t - 1] / math.sqrt(1.0 - abars[t - 1]) * eps_hat) / math.sqrt(alphas[t - 1])
        x = mean + math.sqrt(betas[t - 1]) * noise[:, sch.T - t + 1] if t > 1 else mean
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise FloatingPointError(f"non-finite sampling state in chain {int(np.argmax(bad))} at step {t}")
    wp = model.to_waypoints(x)
    return Vocabulary(wp, "DP", int(np.atleast_1d(seed)[0]),
                      meta={"model_checksum": model.params.checksum(), "seed": np.atleast_1d(seed).tolist()})
