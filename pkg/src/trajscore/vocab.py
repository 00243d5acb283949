"""Static trajectory vocabularies: k-means construction, dropout subsampling, merging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import DT, T_WP, ControlSpec, Trajectory, sample_kinematic_batch

TAGS = ("XL", "L", "DP", "MERGED")


@dataclass(frozen=True)
class Vocabulary:
    trajectories: np.ndarray  # (N, T, 3)
    tag: str
    seed: int = 0
    dt: float = DT
    # index of each member in the vocabulary it was drawn from (nested vocabularies, dropout)
    source_indices: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        tr = np.array(self.trajectories, dtype=float).reshape(-1, T_WP, 3)
        tr.setflags(write=False)
        object.__setattr__(self, "trajectories", tr)
        if self.tag not in TAGS:
            raise ValueError(f"unknown vocabulary tag {self.tag!r}")
        if self.source_indices is not None:
            object.__setattr__(self, "source_indices", np.asarray(self.source_indices, dtype=int))

    def __len__(self):
        return len(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return Trajectory(self.trajectories[i], dt=self.dt)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def to_json(self) -> dict:
        d = {"tag": self.tag, "k": len(self), "seed": self.seed, "T_wp": T_WP, "dt": self.dt,
             "trajectories": self.trajectories.tolist()}
        if self.source_indices is not None:
            d["source_indices"] = self.source_indices.tolist()
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        if int(d.get("T_wp", T_WP)) != T_WP:
            raise ValueError(f"vocabulary has T_wp={d['T_wp']}, expected {T_WP}")
        tr = np.asarray(d["trajectories"], dtype=float).reshape(-1, T_WP, 3)
        if len(tr) != int(d["k"]):
            raise ValueError("vocabulary header k does not match trajectory count")
        src = d.get("source_indices")
        return cls(tr, d["tag"], int(d["seed"]), float(d["dt"]),
                   None if src is None else np.asarray(src, dtype=int), d.get("meta", {}))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


# --- k-means -----------------------------------------------------------------

def _sq_dists(x, c):
    # (n, k) squared distances; fixed evaluation order
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    closest = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every remaining point coincides with a centre; pick any unused point
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[rng.integers(len(free))])
        else:
            nxt = int(rng.choice(n, p=closest / total))
        chosen.append(nxt)
        closest = np.minimum(closest, _sq_dists(x, x[nxt:nxt + 1])[:, 0])
    return x[chosen].copy()


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 50, tol: float = 1e-4):
    """Lloyd's algorithm with k-means++ seeding. Returns (centres, labels, inertia)."""
    x = np.asarray(x, dtype=float)
    centres = kmeans_plusplus(x, k, rng)
    prev = None
    for _ in range(max_iter):
        d = _sq_dists(x, centres)
        labels = np.argmin(d, axis=1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        if prev is not None and abs(prev - inertia) <= tol * max(prev, 1e-12):
            break
        prev = inertia
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centres)
        np.add.at(sums, labels, x)
        nonempty = counts > 0
        centres[nonempty] = sums[nonempty] / counts[nonempty, None]
    d = _sq_dists(x, centres)
    labels = np.argmin(d, axis=1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    return centres, labels, inertia


def inertia(x: np.ndarray, centres: np.ndarray) -> float:
    return float(_sq_dists(np.asarray(x, float), np.asarray(centres, float)).min(axis=1).sum())


def snap_to_samples(centres: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Nearest distinct sample for each centre (greedy in centre order); sorted sample indices."""
    d = _sq_dists(x, centres)
    nearest = np.argmin(d, axis=0)
    used = np.zeros(len(x), bool)
    picked = []
    for j in range(len(centres)):
        i = int(nearest[j])
        if used[i]:
            col = np.where(used, np.inf, d[:, j])
            i = int(np.argmin(col))
        used[i] = True
        picked.append(i)
    return np.sort(np.array(picked, dtype=int))


def _flat_xy(wp):
    return np.ascontiguousarray(np.asarray(wp)[..., :2].reshape(len(wp), -1))


def cluster_vocabulary(samples: np.ndarray, k: int, seed: int, tag: str,
                       max_iter: int = 50, tol: float = 1e-4) -> Vocabulary:
    n = len(samples)
    if k <= 0:
        raise ValueError("k must be positive")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples {n}")
    x = _flat_xy(samples)
    rng = np.random.default_rng([int(seed), 0xC1])
    centres, _, _ = kmeans(x, k, rng, max_iter, tol)
    idx = snap_to_samples(centres, x)
    return Vocabulary(np.asarray(samples)[idx], tag, int(seed), source_indices=idx)


def build_vocabulary(n_samples: int, k: int, seed: int, controls: ControlSpec | None = None,
                     tag: str = "XL") -> Vocabulary:
    """Cluster ``n_samples`` kinematic rollouts into ``k`` members snapped to real samples."""
    if k <= 0 or k > n_samples:
        raise ValueError(f"need 0 < k <= n_samples, got k={k}, n_samples={n_samples}")
    samples = sample_kinematic_batch(np.random.default_rng([int(seed), 0x5A]), n_samples, controls)
    return cluster_vocabulary(samples, k, seed, tag)


def nested_vocabulary(parent: Vocabulary, k: int, seed: int, tag: str = "L") -> Vocabulary:
    """Cluster the members of ``parent`` down to ``k``; source_indices index into ``parent``."""
    return cluster_vocabulary(parent.trajectories, k, seed, tag)


def dropout_indices(n: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    keep = math.ceil(n * (1.0 - rate))
    if keep >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=keep, replace=False))


def dropout_vocab(v: Vocabulary, rate: float = 0.5, rng: np.random.Generator | None = None) -> Vocabulary:
    rng = rng if rng is not None else np.random.default_rng()
    idx = dropout_indices(len(v), rate, rng)
    return replace(v, trajectories=v.trajectories[idx], source_indices=idx)


def merge(v_dp: Vocabulary, v_static: Vocabulary) -> Vocabulary:
    """Static members first, dynamic proposals appended; duplicates kept."""
    if v_dp.trajectories.shape[1:] != v_static.trajectories.shape[1:] or v_dp.dt != v_static.dt:
        raise ValueError("vocabularies differ in waypoint layout or dt")
    tr = np.concatenate([v_static.trajectories, v_dp.trajectories], axis=0)
    return Vocabulary(tr, "MERGED", v_static.seed, v_static.dt,
                      meta={"n_static": len(v_static), "n_dynamic": len(v_dp)})
