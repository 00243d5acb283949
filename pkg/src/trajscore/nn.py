"""Minimal numpy network substrate: parameter store, MLP and cross-attention blocks with
hand-written backward passes, Adam, EMA shadows and finite-difference gradient checks."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np


class StaleCacheError(RuntimeError):
    pass


class ParamStore:
    """Named float64 arrays. ``version`` bumps on every in-place update so stale caches are caught."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.arrays: dict[str, np.ndarray] = {}
        self.version = 0

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __len__(self):
        return len(self.arrays)

    def names(self):
        return list(self.arrays)

    def items(self):
        return self.arrays.items()

    def add(self, name, value):
        if name in self.arrays:
            raise KeyError(f"parameter {name!r} already exists")
        self.arrays[name] = np.array(value, dtype=float)

    def glorot(self, name, fan_in, fan_out, rng):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        self.add(name + ".W", rng.uniform(-a, a, size=(fan_in, fan_out)))
        self.add(name + ".b", np.zeros(fan_out))

    def set(self, name, value):
        value = np.asarray(value, dtype=float)
        if value.shape != self.arrays[name].shape:
            raise ValueError(f"{name}: shape {value.shape} != {self.arrays[name].shape}")
        self.arrays[name] = value.copy()
        self.version += 1

    def bump(self):
        self.version += 1

    def copy(self) -> "ParamStore":
        out = ParamStore(self.seed)
        out.arrays = {k: v.copy() for k, v in self.arrays.items()}
        return out

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        return {"seed": self.seed,
                "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                           for k, v in self.arrays.items()}}

    @classmethod
    def from_json(cls, d) -> "ParamStore":
        out = cls(d.get("seed", 0))
        for k, v in d["params"].items():
            out.arrays[k] = np.asarray(v["values"], dtype=float).reshape(v["shape"])
        return out


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    return (z > 0).astype(float)


@dataclass
class Cache:
    kind: str
    params: ParamStore
    version: int
    data: dict = field(default_factory=dict)


@dataclass(frozen=True)
class MLP:
    """Affine layers with an activation between them; the last layer is linear."""

    name: str
    sizes: tuple
    activation: str = "tanh"

    def init(self, store: ParamStore, rng):
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            store.glorot(f"{self.name}.{i}", a, b, rng)

    @property
    def n_layers(self):
        return len(self.sizes) - 1


def mlp_forward(params: ParamStore, x, mlp: MLP):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != mlp.sizes[0]:
        raise ValueError(f"{mlp.name}: input width {x.shape[-1]} != {mlp.sizes[0]}")
    inputs, pre, post = [], [], []
    h = x
    for i in range(mlp.n_layers):
        inputs.append(h)
        z = h @ params[f"{mlp.name}.{i}.W"] + params[f"{mlp.name}.{i}.b"]
        if i < mlp.n_layers - 1:
            a = _act(mlp.activation, z)
            pre.append(z)
            post.append(a)
            h = a
        else:
            h = z
    return h, Cache("mlp", params, params.version, {"mlp": mlp, "inputs": inputs, "pre": pre, "post": post})


def _mlp_backward(cache: Cache, dy):
    mlp, p = cache.data["mlp"], cache.params
    grads = {}
    g = dy
    for i in reversed(range(mlp.n_layers)):
        if i < mlp.n_layers - 1:
            g = g * _act_grad(mlp.activation, cache.data["pre"][i], cache.data["post"][i])
        x = cache.data["inputs"][i]
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        grads[f"{mlp.name}.{i}.W"] = x2.T @ g2
        grads[f"{mlp.name}.{i}.b"] = g2.sum(axis=0)
        g = g @ p[f"{mlp.name}.{i}.W"].T
    return grads, g


@dataclass(frozen=True)
class AttnBlock:
    """Single-head cross-attention (queries attend to context only) + residual + tanh MLP.

    out = h + W2 tanh(W1 h + b1) + b2,  h = q + softmax(q Wq (c Wk)^T / sqrt(w)) (c Wv) Wo
    """

    name: str
    width: int = 64
    hidden: int = 128

    def init(self, store: ParamStore, rng):
        w = self.width
        for m in ("q", "k", "v", "o"):
            a = math.sqrt(6.0 / (2 * w))
            store.add(f"{self.name}.W{m}", rng.uniform(-a, a, size=(w, w)))
        store.glorot(f"{self.name}.ff1", w, self.hidden, rng)
        store.glorot(f"{self.name}.ff2", self.hidden, w, rng)


def softmax(z, axis=-1):
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attn_forward(params: ParamStore, block: AttnBlock, query, context):
    q_in = np.asarray(query, dtype=float)
    c = np.asarray(context, dtype=float)
    if q_in.shape[-1] != block.width or c.shape[-1] != block.width:
        raise ValueError(f"{block.name}: token width mismatch ({q_in.shape[-1]}, {c.shape[-1]}) "
                         f"vs {block.width}")
    n = block.name
    q = q_in @ params[f"{n}.Wq"]
    k = c @ params[f"{n}.Wk"]
    v = c @ params[f"{n}.Wv"]
    scale = 1.0 / math.sqrt(block.width)
    attn = softmax((q @ k.T) * scale)
    mixed = attn @ v
    h = q_in + mixed @ params[f"{n}.Wo"]
    z1 = h @ params[f"{n}.ff1.W"] + params[f"{n}.ff1.b"]
    a1 = np.tanh(z1)
    out = h + a1 @ params[f"{n}.ff2.W"] + params[f"{n}.ff2.b"]
    data = dict(block=block, q_in=q_in, c=c, q=q, k=k, v=v, attn=attn, mixed=mixed, h=h, a1=a1,
                scale=scale)
    return out, Cache("attn", params, params.version, data)


def _attn_backward(cache: Cache, dout):
    d, p = cache.data, cache.params
    n = d["block"].name
    g = {}
    # feed-forward with residual
    g[f"{n}.ff2.W"] = d["a1"].T @ dout
    g[f"{n}.ff2.b"] = dout.sum(axis=0)
    dz1 = (dout @ p[f"{n}.ff2.W"].T) * (1.0 - d["a1"] ** 2)
    g[f"{n}.ff1.W"] = d["h"].T @ dz1
    g[f"{n}.ff1.b"] = dz1.sum(axis=0)
    dh = dout + dz1 @ p[f"{n}.ff1.W"].T
    # attention with residual
    g[f"{n}.Wo"] = d["mixed"].T @ dh
    dmixed = dh @ p[f"{n}.Wo"].T
    dattn = dmixed @ d["v"].T
    dv = d["attn"].T @ dmixed
    a = d["attn"]
    dscores = a * (dattn - np.sum(dattn * a, axis=-1, keepdims=True)) * d["scale"]
    dq = dscores @ d["k"]
    dk = dscores.T @ d["q"]
    g[f"{n}.Wq"] = d["q_in"].T @ dq
    g[f"{n}.Wk"] = d["c"].T @ dk
    g[f"{n}.Wv"] = d["c"].T @ dv
    dq_in = dh + dq @ p[f"{n}.Wq"].T
    dc = dk @ p[f"{n}.Wk"].T + dv @ p[f"{n}.Wv"].T
    return g, (dq_in, dc)


def backward(cache: Cache, output_grad):
    """Reverse-mode gradients for a forward cache: (param grads, input grad(s))."""
    if cache.version != cache.params.version:
        raise StaleCacheError(f"{cache.kind} cache was built before the latest parameter update")
    dy = np.asarray(output_grad, dtype=float)
    if cache.kind == "mlp":
        return _mlp_backward(cache, dy)
    if cache.kind == "attn":
        return _attn_backward(cache, dy)
    raise ValueError(f"unknown cache kind {cache.kind!r}")


def accumulate(total: dict, grads: dict, scale: float = 1.0):
    for k, v in grads.items():
        if k in total:
            total[k] += scale * v
        else:
            total[k] = scale * np.array(v, dtype=float)
    return total


# --- losses ------------------------------------------------------------------

def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy over all entries and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=float)
    y = np.asarray(targets, dtype=float)
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(loss.mean()), (sigmoid(z) - y) / z.size


def soft_cross_entropy(logits, target_probs):
    z = np.asarray(logits, dtype=float)
    p = softmax(z)
    logp = z - z.max() - np.log(np.exp(z - z.max()).sum())
    return float(-(target_probs * logp).sum()), p - target_probs


# --- optimisation ------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_json(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step,
                "m": {k: x.ravel().tolist() for k, x in self.m.items()},
                "v": {k: x.ravel().tolist() for k, x in self.v.items()}}

    @classmethod
    def from_json(cls, d, params: ParamStore):
        st = cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["weight_decay"], d["step"])
        st.m = {k: np.asarray(x, float).reshape(params[k].shape) for k, x in d["m"].items()}
        st.v = {k: np.asarray(x, float).reshape(params[k].shape) for k, x in d["v"].items()}
        return st


def adam_step(params: ParamStore, grads: dict, state: AdamState):
    """Bias-corrected Adam, updating ``params`` in place (decoupled weight decay)."""
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    for name, g in grads.items():
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p = params.arrays[name]
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    params.bump()
    return params, state


@dataclass
class EmaShadow:
    params: ParamStore
    decay: float = 0.999

    @classmethod
    def track(cls, params: ParamStore, decay: float = 0.999):
        return cls(params.copy(), decay)


def ema_update(shadow: EmaShadow, params: ParamStore, decay: float | None = None) -> EmaShadow:
    d = shadow.decay if decay is None else decay
    for name, p in params.items():
        s = shadow.params.arrays.get(name)
        if s is None or s.shape != p.shape:
            raise ValueError(f"EMA shadow does not mirror parameter {name!r}")
        s *= d
        s += (1.0 - d) * p
    shadow.params.bump()
    return shadow


# --- checks and persistence --------------------------------------------------

def grad_check(loss_fn, params: ParamStore, analytic: dict, h: float = 1e-5, names=None) -> dict:
    """Per-parameter relative error ||a - n|| / (||a|| + ||n||) against central differences.

    ``loss_fn()`` must re-run the forward pass using the current contents of ``params``.
    """
    errors = {}
    for name in names or params.names():
        arr = params.arrays[name]
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            nflat[i] = (up - down) / (2 * h)
        a = analytic.get(name, np.zeros_like(arr))
        denom = np.linalg.norm(a) + np.linalg.norm(num)
        errors[name] = 0.0 if denom < 1e-12 else float(np.linalg.norm(a - num) / denom)
    return errors


def save_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f)


def load_json(path):
    with open(path) as f:
        return json.load(f)
