"""Per-candidate multi-metric trajectory scorers (dense and augmented variants), their training
loops, refinement targets, selection, ensembling and the inference pipeline."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .config import ScorerConfig
from .geometry import T_WP, Trajectory, diff_array, pairwise_distance, rotate_array
from .metrics import DEFAULT_METRICS, METRIC_NAMES, MetricConfig, aggregate_epdms
from .nn import (MLP, AdamState, AttnBlock, EmaShadow, ParamStore, accumulate, adam_step,
                 attn_forward, backward, bce_with_logits, ema_update, mlp_forward, sigmoid,
                 soft_cross_entropy, softmax)
from .vocab import Vocabulary, dropout_indices, merge
from .world import ObservedScene, encode_scene, perturb_scene

N_METRICS = len(METRIC_NAMES)
TOKEN_SCALE = np.array([5.0, 2.0, 0.5])
VARIANTS = ("dense", "aug")


@dataclass(frozen=True)
class Arch:
    tok: MLP
    proj: MLP
    blocks: tuple
    head: MLP
    im: MLP
    refine: AttnBlock
    refine_head: MLP

    @classmethod
    def build(cls, cfg: ScorerConfig, d_feat: int):
        w = cfg.width
        return cls(
            tok=MLP("tok", (3 * T_WP, w, w), "tanh"),
            proj=MLP("proj", (d_feat, 2 * w, cfg.n_context * w), "tanh"),
            blocks=(AttnBlock("blk0", w, cfg.hidden), AttnBlock("blk1", w, cfg.hidden)),
            head=MLP("head", (w, N_METRICS)),
            im=MLP("im", (w, 1)),
            refine=AttnBlock("ref", w, cfg.hidden),
            refine_head=MLP("ref_head", (w, N_METRICS)),
        )


@dataclass
class ScorerModel:
    params: ParamStore
    variant: str
    cfg: ScorerConfig
    d_feat: int
    adam: AdamState
    ema: EmaShadow | None = None
    epoch: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, variant: str, cfg: ScorerConfig, d_feat: int, seed: int):
        if variant not in VARIANTS:
            raise ValueError(f"unknown scorer variant {variant!r}")
        rng = np.random.default_rng([int(seed), 0x5C0])
        arch = Arch.build(cfg, d_feat)
        params = ParamStore(seed)
        for part in (arch.tok, arch.proj, *arch.blocks, arch.head, arch.im):
            part.init(params, rng)
        if variant == "aug":
            arch.refine.init(params, rng)
            arch.refine_head.init(params, rng)
        ema = EmaShadow.track(params, cfg.ema_decay) if variant == "aug" else None
        return cls(params, variant, cfg, d_feat, AdamState(lr=cfg.lr), ema)

    @property
    def arch(self) -> Arch:
        return Arch.build(self.cfg, self.d_feat)

    def to_json(self):
        return {"variant": self.variant, "cfg": asdict(self.cfg), "d_feat": self.d_feat,
                "params": self.params.to_json(), "adam": self.adam.to_json(),
                "ema": None if self.ema is None else {"decay": self.ema.decay,
                                                      "params": self.ema.params.to_json()},
                "epoch": self.epoch, "rng_state": self.rng_state, "meta": self.meta}

    @classmethod
    def from_json(cls, d):
        params = ParamStore.from_json(d["params"])
        ema = None if d["ema"] is None else EmaShadow(ParamStore.from_json(d["ema"]["params"]),
                                                      d["ema"]["decay"])
        return cls(params, d["variant"], ScorerConfig(**d["cfg"]), int(d["d_feat"]),
                   AdamState.from_json(d["adam"], params), ema, int(d["epoch"]), d["rng_state"],
                   d.get("meta", {}))


@dataclass
class ScoredCandidates:
    subscores: np.ndarray  # (N, 9) predicted sub-metrics in (0, 1)
    im_logits: np.ndarray  # (N,)
    selection: np.ndarray  # (N,)

    def __len__(self):
        return len(self.selection)

    def to_json(self):
        return {"subscores": self.subscores.tolist(), "im_logits": self.im_logits.tolist(),
                "selection": self.selection.tolist()}


# --- forward / backward ------------------------------------------------------

def tokenize(wp) -> np.ndarray:
    d = diff_array(np.asarray(wp, dtype=float))
    return (d / TOKEN_SCALE).reshape(len(d), -1)


def _trunk(params, arch: Arch, features, wp):
    feats = np.asarray(features, dtype=float)
    if feats.shape != (arch.proj.sizes[0],):
        raise ValueError(f"feature vector has shape {feats.shape}, expected ({arch.proj.sizes[0]},)")
    x, c_tok = mlp_forward(params, tokenize(wp), arch.tok)
    ctx_flat, c_proj = mlp_forward(params, feats[None], arch.proj)
    ctx = ctx_flat.reshape(-1, arch.blocks[0].width)
    caches = []
    for blk in arch.blocks:
        x, c = attn_forward(params, blk, x, ctx)
        caches.append(c)
    ml, c_h = mlp_forward(params, x, arch.head)
    il, c_i = mlp_forward(params, x, arch.im)
    return {"x": x, "ctx": ctx, "metric_logits": ml, "im_logits": il[:, 0],
            "caches": (c_tok, c_proj, caches, c_h, c_i)}


def _trunk_backward(fw, d_metric, d_im, dx_extra=None, dctx_extra=None):
    c_tok, c_proj, blocks, c_h, c_i = fw["caches"]
    grads = {}
    g, dx = backward(c_h, d_metric)
    accumulate(grads, g)
    g, dx2 = backward(c_i, d_im[:, None])
    accumulate(grads, g)
    dx = dx + dx2
    if dx_extra is not None:
        dx = dx + dx_extra
    dctx = np.zeros_like(fw["ctx"]) if dctx_extra is None else dctx_extra.copy()
    for c in reversed(blocks):
        g, (dx, dc) = backward(c, dx)
        accumulate(grads, g)
        dctx += dc
    g, _ = backward(c_tok, dx)
    accumulate(grads, g)
    g, _ = backward(c_proj, dctx.reshape(1, -1))
    accumulate(grads, g)
    return grads


def selection_scores(probs, im_logits, lambda_im: float, mcfg: MetricConfig = DEFAULT_METRICS):
    """Gate product times weighted soft average of predicted metrics, plus an imitation bonus."""
    return aggregate_epdms(probs, mcfg) / 100.0 + lambda_im * softmax(np.asarray(im_logits, float))


def score_arrays(model: ScorerModel, features, wp) -> ScoredCandidates:
    wp = np.asarray(wp, dtype=float)
    if len(wp) == 0:
        return ScoredCandidates(np.zeros((0, N_METRICS)), np.zeros(0), np.zeros(0))
    fw = _trunk(model.params, model.arch, features, wp)
    probs = sigmoid(fw["metric_logits"])
    return ScoredCandidates(probs, fw["im_logits"], selection_scores(probs, fw["im_logits"], model.cfg.lambda_im))


def score_candidates(model: ScorerModel, features, vocab: Vocabulary) -> ScoredCandidates:
    return score_arrays(model, features, vocab.trajectories)


# --- training ----------------------------------------------------------------

def refine_targets(gt, teacher, delta=0.15):
    """Ground truth nudged toward the teacher by at most ``delta``, kept inside [0, 1]."""
    if np.any(np.asarray(delta) < 0):
        raise ValueError("delta must be non-negative")
    gt = np.asarray(gt, dtype=float)
    corr = np.clip(np.asarray(teacher, dtype=float) - gt, -np.asarray(delta), np.asarray(delta))
    return np.clip(gt + corr, 0.0, 1.0)


def imitation_targets(wp, gt_wp, sigma: float):
    d = pairwise_distance(np.asarray(wp), np.asarray(gt_wp)[None])
    return softmax(-d / sigma)


@dataclass
class TrainingSet:
    """In-memory view of a labelled dataset: scenes, clean features, labels over V_XL, GT plans."""

    scenes: list
    features: np.ndarray  # (S, D)
    labels: np.ndarray  # (S, N_xl, 9)
    gt: np.ndarray  # (S, T, 3)


def scene_loss(model: ScorerModel, features, wp, labels, gt_wp, teacher: ParamStore | None = None):
    """Loss and gradients for one scene's candidate batch.

    Base loss: per-metric BCE (summed over metrics, averaged over candidates) plus imitation
    cross-entropy. With ``teacher`` (aug variant), the top-k candidates also pass through the
    training-only refinement block, supervised by teacher-refined targets.
    """
    cfg, arch = model.cfg, model.arch
    fw = _trunk(model.params, arch, features, wp)
    ml, il = fw["metric_logits"], fw["im_logits"]
    l_m, d_ml = bce_with_logits(ml, labels)
    l_m, d_ml = N_METRICS * l_m, N_METRICS * d_ml
    l_im, d_il = soft_cross_entropy(il, imitation_targets(wp, gt_wp, cfg.sigma_im))
    parts = {"metric": l_m, "imitation": l_im}
    dx_extra = dctx_extra = None
    if teacher is not None:
        probs = sigmoid(ml)
        sel = selection_scores(probs, il, cfg.lambda_im)
        k = min(cfg.topk, len(wp))
        top = np.argsort(-sel, kind="stable")[:k]
        t_fw = _trunk(teacher, arch, features, wp[top])
        targets = refine_targets(labels[top], sigmoid(t_fw["metric_logits"]), cfg.delta)
        xr, c_r = attn_forward(model.params, arch.refine, fw["x"][top], fw["ctx"])
        rl, c_rh = mlp_forward(model.params, xr, arch.refine_head)
        l_r, d_rl = bce_with_logits(rl, targets)
        l_r, d_rl = N_METRICS * l_r, N_METRICS * d_rl
        parts["refine"] = l_r
        grads_r, dxr = backward(c_rh, d_rl)
        g, (dx_top, dctx_r) = backward(c_r, dxr)
        accumulate(grads_r, g)
        if cfg.refine_into_trunk:
            dx_extra = np.zeros_like(fw["x"])
            np.add.at(dx_extra, top, dx_top)
            dctx_extra = dctx_r
    grads = _trunk_backward(fw, d_ml, d_il, dx_extra, dctx_extra)
    if teacher is not None:
        accumulate(grads, grads_r)
    return sum(parts.values()), parts, grads


def _finish_step(model: ScorerModel, grads, n):
    for g in grads.values():
        g /= n
    adam_step(model.params, grads, model.adam)
    if model.ema is not None:
        ema_update(model.ema, model.params)


def train_scorer(model: ScorerModel, data: TrainingSet, vocab: Vocabulary, label_index,
                 epochs: int, seed: int, log=None):
    """Shared loop for both variants. ``label_index`` maps vocab rows to dataset label columns.

    Dense: candidate dropout at ``cfg.dropout_rate`` per scene. Aug: a random view rotation per
    scene (observation, candidates and GT rotated together; labels unchanged) plus refinement.
    """
    cfg = model.cfg
    rng = np.random.default_rng([int(seed), 0x7A1])
    if model.rng_state is not None:
        rng.bit_generator.state = model.rng_state
    label_index = np.asarray(label_index)
    history = []
    for _ in range(epochs):
        order = rng.permutation(len(data.scenes))
        totals, count, grads, pending = {}, 0, {}, 0
        for s in order:
            idx = dropout_indices(len(vocab), cfg.dropout_rate, rng) if cfg.dropout_rate > 0 \
                else np.arange(len(vocab))
            wp = vocab.trajectories[idx]
            labels = data.labels[s][label_index[idx]]
            gt = data.gt[s]
            feats = data.features[s]
            teacher = None
            if model.variant == "aug":
                theta = float(rng.uniform(-cfg.rotation_max, cfg.rotation_max))
                feats = encode_scene(perturb_scene(data.scenes[s], theta), model.d_feat)
                wp, gt = rotate_array(wp, theta), rotate_array(gt, theta)
                teacher = model.ema.params
            loss, parts, g = scene_loss(model, feats, wp, labels, gt, teacher)
            accumulate(grads, g)
            pending += 1
            if pending == cfg.accumulate:
                _finish_step(model, grads, pending)
                grads, pending = {}, 0
            for k, v in parts.items():
                totals[k] = totals.get(k, 0.0) + v
            totals["total"] = totals.get("total", 0.0) + loss
            count += 1
        if pending:
            _finish_step(model, grads, pending)
        model.epoch += 1
        entry = {"epoch": model.epoch, "step": model.adam.step,
                 **{k: v / count for k, v in sorted(totals.items())}}
        history.append(entry)
        if log is not None:
            log(entry)
    model.rng_state = rng.bit_generator.state
    return history


def train_dense(cfg: ScorerConfig, data: TrainingSet, v_xl: Vocabulary, seed: int, d_feat: int,
                epochs: int | None = None, log=None) -> ScorerModel:
    model = ScorerModel.create("dense", cfg, d_feat, seed)
    train_scorer(model, data, v_xl, np.arange(len(v_xl)), epochs or cfg.epochs, seed, log)
    return model


def train_aug(cfg: ScorerConfig, data: TrainingSet, v_l: Vocabulary, seed: int, d_feat: int,
              epochs: int | None = None, log=None) -> ScorerModel:
    if v_l.source_indices is None:
        raise ValueError("V_L must record its indices into V_XL to reuse the dataset labels")
    model = ScorerModel.create("aug", cfg, d_feat, seed)
    train_scorer(model, data, v_l, v_l.source_indices, epochs or cfg.epochs, seed, log)
    return model


# --- selection and inference -------------------------------------------------

def select_trajectory(scored: ScoredCandidates) -> int:
    if len(scored) == 0:
        raise ValueError("no candidates to select from")
    return int(np.argmax(scored.selection))


def ensemble_scores(per_model: list) -> ScoredCandidates:
    if not per_model:
        raise ValueError("need at least one scored candidate set")
    n = len(per_model[0])
    if any(len(s) != n for s in per_model):
        raise ValueError("scored candidate sets are not aligned to the same vocabulary")
    if len(per_model) == 1:
        return per_model[0]
    return ScoredCandidates(
        np.mean([s.subscores for s in per_model], axis=0),
        np.mean([s.im_logits for s in per_model], axis=0),
        np.mean([s.selection for s in per_model], axis=0),
    )


@dataclass
class InferenceResult:
    trajectory: Trajectory
    index: int
    candidates: Vocabulary
    scored: ScoredCandidates
    proposals: Vocabulary | None


def plan(models: list, obs: ObservedScene, v_static: Vocabulary | None, generator=None,
         n_dp: int = 100, seed=0, proposals: Vocabulary | None = None) -> InferenceResult:
    """Score static and generated candidates; ``proposals`` skips sampling when already drawn."""
    from .diffusion import sample_proposals

    if not models:
        raise ValueError("need at least one scorer")
    feats = encode_scene(obs, models[0].d_feat)
    if proposals is not None:
        v_dp = proposals
    else:
        v_dp = sample_proposals(generator, feats, n_dp, seed) if n_dp > 0 else None
    if v_static is None and v_dp is None:
        raise ValueError("no candidates: empty static vocabulary and n_dp = 0")
    if v_static is None:
        cands = v_dp
    elif v_dp is None:
        cands = v_static
    else:
        cands = merge(v_dp, v_static)
    scored = ensemble_scores([score_candidates(m, feats, cands) for m in models])
    i = select_trajectory(scored)
    return InferenceResult(cands[i], i, cands, scored, v_dp)


def run_inference(models: list, obs: ObservedScene, v_static: Vocabulary | None, generator=None,
                  n_dp: int = 100, seed=0) -> Trajectory:
    return plan(models, obs, v_static, generator, n_dp, seed).trajectory
