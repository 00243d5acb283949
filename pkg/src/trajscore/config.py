"""Experiment configuration records, JSON loading and section hashes."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

SELECTORS = ("dp", "xl", "dp+xl", "dp+l")


@dataclass
class WorldConfig:
    n_train: int = 2000
    n_eval: int = 200
    hard_fraction: float = 0.5
    shard_size: int = 100


@dataclass
class VocabConfig:
    n_samples: int = 16384
    k_xl: int = 1024
    k_l: int = 512


@dataclass
class GeneratorConfig:
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    epochs: int = 50
    batch_size: int = 32
    hidden: int = 256
    lr: float = 2e-4


@dataclass
class ScorerConfig:
    epochs: int = 20
    lr: float = 2e-4
    width: int = 64
    hidden: int = 128
    n_context: int = 8
    dropout_rate: float = 0.5
    train_vocab: str = "xl"  # dense default; aug trains on "l"
    lambda_im: float = 0.1
    sigma_im: float = 1.0
    delta: float = 0.15
    topk: int = 32
    ema_decay: float = 0.999
    rotation_max: float = math.pi / 12
    accumulate: int = 1
    refine_into_trunk: bool = True


@dataclass
class Stage2Config:
    rotation_max: float = math.pi / 12
    noise_sigma: float = 0.3
    dropout_frac: float = 0.2


@dataclass
class EvalConfig:
    inference_vocab: str = "dp+l"
    n_dp: int = 100


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    d_feat: int = 128
    world: WorldConfig = field(default_factory=WorldConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        w, v = self.world, self.vocab
        if w.n_train <= 0 or w.n_eval <= 0:
            raise ValueError("scene counts must be positive")
        if w.shard_size <= 0:
            raise ValueError("shard_size must be positive")
        if not 0 < v.k_l < v.k_xl <= v.n_samples:
            raise ValueError(f"need 0 < k_l < k_xl <= n_samples, got {v.k_l}, {v.k_xl}, {v.n_samples}")
        if not 0.0 <= self.scorer.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.scorer.train_vocab not in ("xl", "l"):
            raise ValueError("scorer.train_vocab must be 'xl' or 'l'")
        if self.eval.inference_vocab not in SELECTORS:
            raise ValueError(f"inference_vocab must be one of {SELECTORS}")
        if self.eval.n_dp < 0:
            raise ValueError("n_dp must be >= 0")
        if self.generator.epochs <= 0 or self.scorer.epochs <= 0:
            raise ValueError("epoch counts must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d).validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def section_hash(self, section: str) -> str:
        """Hash of the settings an artifact depends on."""
        d = self.to_dict()
        parts = {
            "dataset": {"seed": d["seed"], "d_feat": d["d_feat"], "vocab": d["vocab"],
                        "world": {k: v for k, v in d["world"].items() if k != "n_eval"}},
            "generator": {"generator": d["generator"]},
            "scorer": {"scorer": d["scorer"]},
            "eval": {"stage2": d["stage2"], "eval": d["eval"], "n_eval": d["world"]["n_eval"]},
        }
        if section not in parts:
            raise KeyError(section)
        if section != "dataset":
            parts[section]["dataset"] = parts["dataset"]
        return stable_hash(parts[section])


def _build(cls, d):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        factory = known[name].default_factory
        sub = factory() if factory is not MISSING else None
        kwargs[name] = _build(type(sub), value) if is_dataclass(sub) and isinstance(value, dict) else value
    return cls(**kwargs)


def stable_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    d = cfg.to_dict()
    for key, value in overrides.items():
        node = d
        *path, leaf = key.split(".")
        for p in path:
            node = node[p]
        node[leaf] = value
    return ExperimentConfig.from_dict(d)
