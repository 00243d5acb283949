"""Reproducible experiment pipeline: dataset labelling, training, two-stage evaluation, reports."""

from __future__ import annotations

import base64
import csv
import hashlib
import io
import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, stable_hash
from .diffusion import GeneratorModel, make_schedule, sample_proposals, train_step_generator
from .metrics import METRIC_NAMES, aggregate_epdms, evaluate_batch, oracle_index, two_stage_score
from .scorer import ScorerModel, TrainingSet, plan, train_scorer
from .vocab import Vocabulary, build_vocabulary, nested_vocabulary
from .world import Scene, encode_scene, generate_scene, perturb_scene

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 5_000_000
SEED_STRIDE = 10_000_000


class HarnessError(RuntimeError):
    """Pipeline failure with a machine-readable kind."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind

    def record(self):
        return {"error": self.kind, "message": str(self)}


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def config(self):
        return self.root / "config.json"

    @property
    def vocab_xl(self):
        return self.root / "vocab_xl.json"

    @property
    def vocab_l(self):
        return self.root / "vocab_l.json"

    @property
    def dataset(self):
        return self.root / "dataset"

    @property
    def manifest(self):
        return self.dataset / "manifest.json"

    @property
    def checkpoints(self):
        return self.root / "checkpoints"

    @property
    def logs(self):
        return self.root / "logs"

    @property
    def reports(self):
        return self.root / "reports"

    def checkpoint(self, name):
        return self.checkpoints / f"{name}.json"

    def ensure(self):
        for p in (self.root, self.dataset, self.checkpoints, self.logs, self.reports):
            p.mkdir(parents=True, exist_ok=True)
        return self


def paths_for(cfg: ExperimentConfig) -> RunPaths:
    return RunPaths(Path(cfg.out_dir)).ensure()


def scene_specs(cfg: ExperimentConfig, split: str):
    """(seed, difficulty) for every scene of a split; train and eval seed ranges never overlap."""
    n = cfg.world.n_train if split == "train" else cfg.world.n_eval
    if n >= EVAL_SEED_OFFSET:
        raise HarnessError("config", "scene count exceeds the per-split seed range")
    base = cfg.seed * SEED_STRIDE + (0 if split == "train" else EVAL_SEED_OFFSET)
    hard = substream(cfg.seed, f"difficulty/{split}").random(n) < cfg.world.hard_fraction
    return [(base + i, "hard" if h else "easy") for i, h in enumerate(hard)]


def _write_json(path, payload, indent=None):
    Path(path).write_text(json.dumps(payload, indent=indent, sort_keys=True))


def _read_json(path):
    p = Path(path)
    if not p.exists():
        raise HarnessError("missing_artifact", f"{p} does not exist")
    return json.loads(p.read_text())


def _check_hash(found, expected, what):
    if found != expected:
        raise HarnessError("hash_mismatch",
                           f"{what} was built with dataset hash {found}, current config gives {expected}")


# --- vocabularies and dataset ------------------------------------------------

def cmd_vocab_build(cfg: ExperimentConfig):
    paths = paths_for(cfg)
    dhash = cfg.section_hash("dataset")
    if paths.vocab_xl.exists() and paths.vocab_l.exists():
        xl, vl = Vocabulary.load(paths.vocab_xl), Vocabulary.load(paths.vocab_l)
        if xl.meta.get("dataset_hash") == dhash and vl.meta.get("dataset_hash") == dhash:
            return xl, vl
    vseed = int(substream(cfg.seed, "vocab").integers(2**31))
    xl = build_vocabulary(cfg.vocab.n_samples, cfg.vocab.k_xl, vseed, tag="XL")
    vl = nested_vocabulary(xl, cfg.vocab.k_l, vseed, tag="L")
    xl.meta["dataset_hash"] = dhash
    vl.meta["dataset_hash"] = dhash
    xl.save(paths.vocab_xl)
    vl.save(paths.vocab_l)
    return xl, vl


def load_vocabs(cfg: ExperimentConfig):
    paths = paths_for(cfg)
    xl, vl = Vocabulary.load(paths.vocab_xl), Vocabulary.load(paths.vocab_l)
    dhash = cfg.section_hash("dataset")
    _check_hash(xl.meta.get("dataset_hash"), dhash, "vocab_xl")
    _check_hash(vl.meta.get("dataset_hash"), dhash, "vocab_l")
    return xl, vl


def _encode_labels(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f4")
    return {"dtype": "<f4", "shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode()}


def _decode_labels(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=d["dtype"]).reshape(d["shape"])


def label_scene(scene: Scene, xl: Vocabulary):
    labels = evaluate_batch(scene, xl.trajectories, xl.dt)
    gt = oracle_index(scene, xl.trajectories, xl.dt)
    return labels, gt


def cmd_dataset_build(cfg: ExperimentConfig):
    """Generate and label training scenes into JSON-lines shards; finished shards are reused."""
    paths = paths_for(cfg)
    cfg.save(paths.config)
    xl, _ = cmd_vocab_build(cfg)
    dhash = cfg.section_hash("dataset")
    specs = scene_specs(cfg, "train")
    size = cfg.world.shard_size
    old = json.loads(paths.manifest.read_text()) if paths.manifest.exists() else {}
    done = {s["file"]: s for s in old.get("shards", [])} if old.get("dataset_hash") == dhash else {}
    shards = []
    for k, lo in enumerate(range(0, len(specs), size)):
        name = f"shard_{k:04d}.jsonl"
        fpath = paths.dataset / name
        prev = done.get(name)
        if prev and fpath.exists() and _sha(fpath) == prev["sha256"]:
            shards.append(prev)
            continue
        buf, offsets = io.StringIO(), []
        for seed, diff in specs[lo:lo + size]:
            try:
                scene = generate_scene(seed, diff)
                labels, gt = label_scene(scene, xl)
            except Exception as exc:  # surfaced with the failing scene id
                raise HarnessError("labeling", f"scene {seed} ({diff}): {exc}") from exc
            offsets.append(len(buf.getvalue().encode()))
            rec = {"scene": scene.to_json(), "gt_index": gt,
                   "gt_trajectory": xl.trajectories[gt].tolist(), "labels": _encode_labels(labels)}
            buf.write(json.dumps(rec, sort_keys=True) + "\n")
        fpath.write_text(buf.getvalue())
        shards.append({"file": name, "n": len(offsets), "offsets": offsets, "sha256": _sha(fpath)})
        log.info("wrote %s (%d scenes)", name, len(offsets))
    # the output location is not part of what the data depends on
    run_cfg = {k: v for k, v in cfg.to_dict().items() if k != "out_dir"}
    manifest = {"dataset_hash": dhash, "config_hash": stable_hash(run_cfg),
                "n_scenes": len(specs), "n_xl": len(xl), "label_rows": len(specs) * len(xl),
                "metrics": list(METRIC_NAMES), "shards": shards}
    _write_json(paths.manifest, manifest, indent=1)
    return manifest


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_training_set(cfg: ExperimentConfig) -> TrainingSet:
    paths = paths_for(cfg)
    manifest = _read_json(paths.manifest)
    _check_hash(manifest["dataset_hash"], cfg.section_hash("dataset"), "dataset")
    scenes, labels, gts = [], [], []
    for shard in manifest["shards"]:
        for line in (paths.dataset / shard["file"]).read_text().splitlines():
            rec = json.loads(line)
            scenes.append(Scene.from_json(rec["scene"]))
            labels.append(_decode_labels(rec["labels"]))
            gts.append(rec["gt_trajectory"])
    feats = np.stack([encode_scene(perturb_scene(s), cfg.d_feat) for s in scenes])
    return TrainingSet(scenes, feats, np.stack(labels), np.asarray(gts, dtype=float))


# --- training ----------------------------------------------------------------

def _write_log(paths: RunPaths, name: str, entries: list, append: bool):
    p = paths.logs / f"train_{name}.json"
    prev = json.loads(p.read_text())["epochs"] if append and p.exists() else []
    _write_json(p, {"name": name, "epochs": prev + entries}, indent=1)


def train_generator(cfg: ExperimentConfig, data: TrainingSet, resume: GeneratorModel | None = None):
    g = cfg.generator
    model = resume or GeneratorModel.create(cfg.d_feat, int(substream(cfg.seed, "generator").integers(2**31)),
                                            g.hidden, make_schedule(g.T, g.beta_min, g.beta_max), g.lr)
    if resume is None:
        model.fit_normalization(data.gt)
    rng = substream(cfg.seed, f"generator/steps/{model.adam.step}")
    entries = []
    for _ in range(g.epochs):
        order = rng.permutation(len(data.gt))
        losses = []
        for lo in range(0, len(order), g.batch_size):
            b = order[lo:lo + g.batch_size]
            losses.append(train_step_generator(model, data.features[b], data.gt[b], rng))
        entries.append({"epoch": len(entries) + 1, "step": model.adam.step, "loss": float(np.mean(losses))})
    return model, entries


SCORER_COMPONENTS = ("dense", "aug")


def train_scorer_component(cfg: ExperimentConfig, component: str, data: TrainingSet, xl: Vocabulary,
                           vl: Vocabulary, resume: ScorerModel | None = None, seed_name: str = ""):
    sc = cfg.scorer
    if component == "aug":
        # the augmented scorer trains on V_L without vocabulary dropout
        from dataclasses import replace
        sc = replace(sc, train_vocab="l", dropout_rate=0.0)
    vocab = xl if sc.train_vocab == "xl" else vl
    label_index = np.arange(len(xl)) if sc.train_vocab == "xl" else vl.source_indices
    seed = int(substream(cfg.seed, f"scorer/{component}/{seed_name}").integers(2**31))
    model = resume or ScorerModel.create(component, sc, cfg.d_feat, seed)
    history = train_scorer(model, data, vocab, label_index, sc.epochs, seed)
    model.meta.update({"train_vocab": sc.train_vocab, "dropout_rate": sc.dropout_rate, "variant": component})
    return model, history


def cmd_train(cfg: ExperimentConfig, component: str, name: str | None = None, resume: bool = False,
              data: TrainingSet | None = None):
    paths = paths_for(cfg)
    name = name or component
    dhash = cfg.section_hash("dataset")
    data = data or load_training_set(cfg)
    ckpt_path = paths.checkpoint(name)
    prev = None
    if resume:
        d = _read_json(ckpt_path)
        _check_hash(d["dataset_hash"], dhash, f"checkpoint {name}")
        prev = d["model"]
    if component == "generator":
        model, entries = train_generator(cfg, data, GeneratorModel.from_json(prev) if prev else None)
        section = "generator"
    elif component in SCORER_COMPONENTS:
        xl, vl = load_vocabs(cfg)
        model, entries = train_scorer_component(cfg, component, data, xl, vl,
                                                ScorerModel.from_json(prev) if prev else None, seed_name=name)
        section = "scorer"
    else:
        raise HarnessError("usage", f"unknown component {component!r}")
    payload = {"kind": component, "name": name, "dataset_hash": dhash,
               "config_hash": cfg.section_hash(section), "checksum": model.params.checksum(),
               "model": model.to_json()}
    _write_json(ckpt_path, payload)
    _write_log(paths, name, entries, append=resume)
    return payload


def load_checkpoint(cfg: ExperimentConfig, name_or_path):
    p = Path(name_or_path)
    if not p.suffix:
        p = paths_for(cfg).checkpoint(name_or_path)
    d = _read_json(p)
    _check_hash(d["dataset_hash"], cfg.section_hash("dataset"), f"checkpoint {p.name}")
    model = GeneratorModel.from_json(d["model"]) if d["kind"] == "generator" else ScorerModel.from_json(d["model"])
    return d, model


# --- evaluation --------------------------------------------------------------

def eval_scenes(cfg: ExperimentConfig):
    """Stage-1 (clean) and stage-2 (rotated, noisy, dropped-out) observations for each eval scene."""
    rng = substream(cfg.seed, "eval/stage2")
    out = []
    s2 = cfg.stage2
    for seed, diff in scene_specs(cfg, "eval"):
        scene = generate_scene(seed, diff)
        theta = float(rng.uniform(-s2.rotation_max, s2.rotation_max))
        out.append((scene, perturb_scene(scene, seed=seed),
                    perturb_scene(scene, theta, s2.noise_sigma, s2.dropout_frac, seed)))
    return out


def _static_for(selector, xl, vl):
    return {"dp": None, "xl": xl, "dp+xl": xl, "dp+l": vl}[selector]


def _summary(rows):
    by_stage = {1: [r for r in rows if r["stage"] == 1], 2: [r for r in rows if r["stage"] == 2]}
    e1 = [r["epdms"] for r in by_stage[1]]
    e2 = [r["epdms"] for r in by_stage[2]]
    m1, m2, final = two_stage_score(e1, e2)
    subs = {f"stage{k}": {m: float(np.mean([r["subscores"][m] for r in v])) for m in METRIC_NAMES}
            for k, v in by_stage.items()}
    return {"stage1_mean": m1, "stage2_mean": m2, "final": final, "subscore_means": subs}


def _row(scene_id, stage, m):
    return {"scene_id": scene_id, "stage": stage,
            "subscores": {n: float(x) for n, x in zip(METRIC_NAMES, m)}, "epdms": float(aggregate_epdms(m))}


def cmd_eval(cfg: ExperimentConfig, checkpoints: list, selector: str | None = None, generator: str = "generator",
             name: str | None = None, scenes=None, cache: dict | None = None):
    """Two-stage evaluation of one scorer (or an ensemble) plus random-proposal and oracle baselines."""
    selector = selector or cfg.eval.inference_vocab
    if selector not in ("dp", "xl", "dp+xl", "dp+l"):
        raise HarnessError("usage", f"unknown inference vocabulary {selector!r}")
    if not checkpoints:
        raise HarnessError("missing_artifact", "no scorer checkpoints given")
    paths = paths_for(cfg)
    xl, vl = load_vocabs(cfg)
    metas, models = zip(*(load_checkpoint(cfg, c) for c in checkpoints))
    if any(m["kind"] == "generator" for m in metas):
        raise HarnessError("usage", "scorer checkpoint expected, got a generator")
    n_dp = 0 if selector == "xl" else cfg.eval.n_dp
    if selector == "dp" and n_dp == 0:
        raise HarnessError("config", "selector 'dp' needs n_dp > 0")
    gen = load_checkpoint(cfg, generator)[1] if n_dp > 0 else None
    static = _static_for(selector, xl, vl)
    scenes = scenes if scenes is not None else eval_scenes(cfg)

    cache = cache if cache is not None else {}
    gkey = gen.params.checksum() if gen is not None else None
    rows, random_rows, oracle_rows = [], [], []
    for scene, obs1, obs2 in scenes:
        for stage, obs in ((1, obs1), (2, obs2)):
            truth = obs.truth()
            props = None
            if gen is not None:
                pkey = ("dp", gkey, n_dp, scene.seed, stage)
                if pkey not in cache:
                    cache[pkey] = sample_proposals(gen, encode_scene(obs, cfg.d_feat), n_dp, [scene.seed, stage])
                props = cache[pkey]
            res = plan(list(models), obs, static, proposals=props, n_dp=0)
            chosen = evaluate_batch(truth, res.trajectory.waypoints[None])[0]
            rows.append(_row(scene.seed, stage, chosen))
            if props is not None:
                rkey = ("random", gkey, scene.seed, stage)
                if rkey not in cache:
                    j = int(substream(scene.seed, f"random/{stage}").integers(len(props)))
                    cache[rkey] = _row(scene.seed, stage, evaluate_batch(truth, props.trajectories[j:j + 1])[0])
                random_rows.append(cache[rkey])
            okey = ("oracle", gkey, selector, scene.seed, stage)
            if okey not in cache:
                cand = res.candidates.trajectories
                cache[okey] = _row(scene.seed, stage, evaluate_batch(truth, cand[[oracle_index(truth, cand)]])[0])
            oracle_rows.append(cache[okey])

    name = name or "_".join([Path(str(c)).stem for c in checkpoints]) + f"@{selector}"
    report = {
        "name": name,
        "models": [{"name": m["name"], "kind": m["kind"], "checksum": m["checksum"],
                    "train_vocab": m["model"]["meta"].get("train_vocab"),
                    "dropout_rate": m["model"]["meta"].get("dropout_rate")} for m in metas],
        "inference_vocab": selector,
        "n_dp": n_dp,
        "dataset_hash": cfg.section_hash("dataset"),
        "eval_hash": cfg.section_hash("eval"),
        **_summary(rows),
        "per_scene": rows,
        "baselines": {"oracle": {**_summary(oracle_rows), "per_scene": oracle_rows}},
    }
    if random_rows:
        report["baselines"]["random_dp"] = {**_summary(random_rows), "per_scene": random_rows}
    safe = name.replace("/", "_").replace("+", "p")
    _write_json(paths.reports / f"eval_{safe}.json", report, indent=1)
    (paths.reports / f"eval_{safe}.txt").write_text(format_subscore_table(report))
    return report


def format_subscore_table(report: dict) -> str:
    """Aligned text table: one row per (method, stage), columns NC..EC then EPDMS."""
    cols = [m.upper() for m in METRIC_NAMES] + ["EPDMS"]
    lines = [f"{'method':<28}{'stage':>6}" + "".join(f"{c:>8}" for c in cols)]
    entries = [(report["name"], report)] + [(k, v) for k, v in report.get("baselines", {}).items()]
    for label, rep in entries:
        for stage in (1, 2):
            sub = rep["subscore_means"][f"stage{stage}"]
            vals = [100 * sub[m] for m in METRIC_NAMES] + [rep[f"stage{stage}_mean"]]
            lines.append(f"{label:<28}{stage:>6}" + "".join(f"{v:>8.1f}" for v in vals))
        lines.append(f"{label:<28}{'final':>6}" + " " * 8 * len(METRIC_NAMES) + f"{rep['final']:>8.1f}")
    return "\n".join(lines) + "\n"


# --- reporting ---------------------------------------------------------------

ROADMAP_FIELDS = ("method", "train_vocab", "inference_vocab", "epdms1", "epdms2", "epdms")


def roadmap_rows(reports: list, baselines: bool = True) -> list:
    rows = []
    seen_baselines = set()
    for rep in reports:
        if len(rep["models"]) == 1:
            method = rep["models"][0]["name"]
        else:
            method = f"{rep['name'].split('@')[0]}[{len(rep['models'])}]"
        tv = "/".join(sorted({str(m["train_vocab"]) for m in rep["models"]}))
        if any(m.get("dropout_rate") for m in rep["models"]):
            tv += " (dropout)"
        rows.append({"method": method, "train_vocab": tv, "inference_vocab": rep["inference_vocab"],
                     "epdms1": rep["stage1_mean"], "epdms2": rep["stage2_mean"], "epdms": rep["final"]})
        for key, label, sel in (("random_dp", "dp-random", "dp"), ("oracle", "oracle", rep["inference_vocab"])):
            if not baselines:
                break
            base = rep.get("baselines", {}).get(key)
            if base and (label, sel) not in seen_baselines:
                seen_baselines.add((label, sel))
                rows.append({"method": label, "train_vocab": "-", "inference_vocab": sel,
                             "epdms1": base["stage1_mean"], "epdms2": base["stage2_mean"], "epdms": base["final"]})
    rows.sort(key=lambda r: (-r["epdms"], r["method"], r["inference_vocab"]))
    return rows


def cmd_report(run_dir, figures: bool = True, baselines: bool = True):
    reports_dir = Path(run_dir) / "reports"
    files = sorted(reports_dir.glob("eval_*.json")) if reports_dir.exists() else []
    if not files:
        raise HarnessError("missing_artifact", f"no evaluation reports under {reports_dir}")
    reports = [json.loads(f.read_text()) for f in files]
    rows = roadmap_rows(reports, baselines)
    with open(Path(run_dir) / "roadmap.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ROADMAP_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    text = format_roadmap(rows)
    (Path(run_dir) / "roadmap.txt").write_text(text)
    if figures:
        from .plotting import plot_roadmap, plot_subscores
        plot_roadmap(rows, Path(run_dir) / "roadmap.png")
        plot_subscores(reports, Path(run_dir) / "subscores.png")
    return rows


def format_roadmap(rows) -> str:
    head = f"{'method':<34}{'train vocab':<18}{'inference':<11}{'EPDMS1':>8}{'EPDMS2':>8}{'EPDMS':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['method']:<34}{r['train_vocab']:<18}{r['inference_vocab']:<11}"
                     f"{r['epdms1']:>8.1f}{r['epdms2']:>8.1f}{r['epdms']:>8.1f}")
    return "\n".join(lines) + "\n"


# --- full pipeline -----------------------------------------------------------

def run_roadmap(cfg: ExperimentConfig, figures: bool = True, ensemble_extra: bool = True):
    """Dataset, generator, the scorer variants of the ablation grid, every evaluation, the report."""
    from .config import with_overrides

    paths = paths_for(cfg)
    cmd_dataset_build(cfg)
    data = load_training_set(cfg)
    cmd_train(cfg, "generator", data=data)
    cmd_train(cfg, "dense", "dense_dropout", data=data)
    cmd_train(with_overrides(cfg, {"scorer.dropout_rate": 0.0}), "dense", "dense_full", data=data)
    cmd_train(with_overrides(cfg, {"scorer.dropout_rate": 0.0, "scorer.train_vocab": "l"}), "dense",
              "baseline_l", data=data)
    cmd_train(cfg, "aug", "aug", data=data)
    ens = ["dense_dropout", "dense_full", "aug"]
    if ensemble_extra:
        # two dense plus two augmented members
        cmd_train(cfg, "aug", "aug_b", data=data)
        ens.append("aug_b")
    scenes = eval_scenes(cfg)
    cache = {}
    reports = {}
    for sel in ("dp", "xl", "dp+xl", "dp+l"):
        reports[f"dense_full@{sel}"] = cmd_eval(cfg, ["dense_full"], sel, scenes=scenes, cache=cache)
    for nm in ("dense_dropout", "baseline_l", "aug", *ens[3:]):
        reports[f"{nm}@dp+l"] = cmd_eval(cfg, [nm], "dp+l", scenes=scenes, cache=cache)
    reports["dense_dropout@dp"] = cmd_eval(cfg, ["dense_dropout"], "dp", scenes=scenes, cache=cache)
    reports["ensemble@dp+l"] = cmd_eval(cfg, ens, "dp+l", name="ensemble@dp+l", scenes=scenes, cache=cache)
    rows = cmd_report(paths.root, figures=figures)
    return reports, rows
