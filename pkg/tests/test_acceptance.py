"""Acceptance criteria 1-10. Each test records a one-line PASS/FAIL summary (printed at the end)."""

import filecmp
import math
import time

import numpy as np
import pytest

from oracles import brute_nc, brute_ttc
from trajscore import harness
from trajscore.config import ExperimentConfig, ScorerConfig
from trajscore.diffusion import GeneratorModel, generator_loss, make_schedule, q_sample, X_DIM
from trajscore.geometry import (
    T_WP, Trajectory, diff_normalize, integrate_deltas, rotate_traj, sample_kinematic_batch, traj_distance,
)
from trajscore.metrics import (
    SubScores, aggregate_epdms, collision_flags, evaluate_batch, oracle_index, two_stage_score,
)
from trajscore.nn import (
    MLP, AttnBlock, EmaShadow, ParamStore, attn_forward, backward, ema_update, grad_check, mlp_forward, softmax,
)
from trajscore.scorer import ScorerModel, refine_targets, scene_loss
from trajscore.vocab import Vocabulary, build_vocabulary, dropout_indices, merge
from trajscore.world import encode_scene, generate_scene, perturb_scene

SEEDS = (0, 1, 2)

# reduced sizes: the shapes of the default experiment at roughly a tenth of the work
PIPELINE = {
    "world": {"n_train": 300, "n_eval": 150, "shard_size": 100},
    "vocab": {"n_samples": 4096, "k_xl": 256, "k_l": 128},
    "generator": {"epochs": 300, "lr": 1e-3},
    "scorer": {"epochs": 15, "lr": 1e-3},
    "eval": {"n_dp": 100},
}


def pipeline_config(seed, out_dir):
    return ExperimentConfig.from_dict({**PIPELINE, "seed": seed, "out_dir": str(out_dir)})


@pytest.fixture(scope="session")
def pipelines(tmp_path_factory):
    out = {}
    for seed in SEEDS:
        t0 = time.time()
        cfg = pipeline_config(seed, tmp_path_factory.mktemp(f"seed{seed}"))
        reports, rows = harness.run_roadmap(cfg)
        out[seed] = {"cfg": cfg, "reports": reports, "rows": rows, "seconds": time.time() - t0}
    return out


# --- 1 ------------------------------------------------------------------------

def _rel(a, n):
    d = np.linalg.norm(a) + np.linalg.norm(n)
    return 0.0 if d < 1e-12 else float(np.linalg.norm(a - n) / d)


def test_criterion_01_numeric_core(acceptance_record):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_rt = worst_iso = worst_sm = 0.0
    for _ in range(500):
        wp = rng.uniform(-30, 30, (T_WP, 3))
        t = Trajectory(wp)
        worst_rt = max(worst_rt, float(np.max(np.abs(integrate_deltas(diff_normalize(t)).waypoints - t.waypoints))))
        u = Trajectory(rng.uniform(-30, 30, (T_WP, 3)))
        th = rng.uniform(-math.pi, math.pi)
        worst_iso = max(worst_iso, abs(traj_distance(rotate_traj(t, th), rotate_traj(u, th)) - traj_distance(t, u)))
        z = rng.normal(scale=rng.uniform(0.1, 30), size=(7, 50))
        worst_sm = max(worst_sm, float(np.max(np.abs(softmax(z).sum(axis=1) - 1))))

    errs = {}
    for act in ("tanh", "relu"):
        p = ParamStore()
        net = MLP("m", (5, 6, 3), act)
        net.init(p, rng)
        x, w = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))
        y, c = mlp_forward(p, x, net)
        g, _ = backward(c, w)
        errs[f"mlp-{act}"] = max(grad_check(lambda: float(np.sum(mlp_forward(p, x, net)[0] * w)), p, g).values())
    p = ParamStore()
    blk = AttnBlock("a", 6, 7)
    blk.init(p, rng)
    q, ctx, w = rng.normal(size=(3, 6)), rng.normal(size=(4, 6)), rng.normal(size=(3, 6))
    _, c = attn_forward(p, blk, q, ctx)
    g, _ = backward(c, w)
    errs["attention"] = max(grad_check(lambda: float(np.sum(attn_forward(p, blk, q, ctx)[0] * w)), p, g).values())

    scfg = ScorerConfig(width=8, hidden=10, n_context=2, topk=3)
    scenes = generate_scene(1, "hard")
    cands = sample_kinematic_batch(rng, 8)
    labels = evaluate_batch(scenes, cands)
    gt = cands[oracle_index(scenes, cands)]
    feats = encode_scene(perturb_scene(scenes), 24)
    for variant in ("dense", "aug"):
        m = ScorerModel.create(variant, scfg, 24, 1)
        teacher = None
        if variant == "aug":
            teacher = m.ema.params.copy()
            for a in teacher.arrays.values():
                a += 0.05
        _, _, g = scene_loss(m, feats, cands, labels, gt, teacher)
        errs[f"scorer-{variant}"] = max(grad_check(
            lambda: scene_loss(m, feats, cands, labels, gt, teacher)[0], m.params, g).values())
    gm = GeneratorModel.create(6, 2, hidden=8)
    gm.params.arrays[f"den.{gm.net.n_layers - 1}.W"][:] = rng.normal(scale=0.1, size=(8, X_DIM))
    gwp = rng.normal(size=(3, T_WP, 3))
    gm.fit_normalization(gwp)
    gf = rng.normal(size=(3, 6))
    _, g = generator_loss(gm, gf, gwp, np.random.default_rng(5))
    errs["generator"] = max(grad_check(
        lambda: generator_loss(gm, gf, gwp, np.random.default_rng(5))[0], gm.params, g).values())

    shadow = EmaShadow(ParamStore(), 0.95)
    shadow.params.add("w", np.zeros(3))
    target = ParamStore()
    target.add("w", np.array([1.0, -2.0, 0.5]))
    ema_err = 0.0
    for k in range(1, 101):
        ema_update(shadow, target)
        ema_err = max(ema_err, float(np.max(np.abs(shadow.params["w"] - (1 - 0.95 ** k) * target["w"]))))
    secs = time.time() - t0
    ok = (worst_rt <= 1e-9 and worst_iso <= 1e-9 and worst_sm <= 1e-9 and max(errs.values()) < 1e-4
          and ema_err <= 1e-12 and secs < 60)
    acceptance_record(1, ok, f"roundtrip {worst_rt:.1e}, isometry {worst_iso:.1e}, softmax {worst_sm:.1e}, "
                             f"max grad-check rel err {max(errs.values()):.1e} over {len(errs)} blocks, "
                             f"EMA closed form {ema_err:.1e}, {secs:.0f}s")
    assert ok, errs


# --- 2 ------------------------------------------------------------------------

def test_criterion_02_metric_oracle(acceptance_record):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    n = 200
    agree = {"nc": 0, "ttc": 0}
    worst_gap = 0.0
    for i in range(n):
        scene = generate_scene(900_000 + i, "hard")
        wp = sample_kinematic_batch(rng, 1)[0]
        fast_nc, fast_ttc = (bool(x[0]) for x in collision_flags(scene, wp[None]))
        slow_nc, gap_nc = brute_nc(scene, wp)
        slow_ttc, gap_ttc = brute_ttc(scene, wp)
        for key, fast, slow, gap in (("nc", fast_nc, slow_nc, gap_nc), ("ttc", fast_ttc, slow_ttc, gap_ttc)):
            if fast == slow:
                agree[key] += 1
            else:
                worst_gap = max(worst_gap, abs(gap))
    hand = aggregate_epdms(SubScores(1, 1, 1, 1, 0.5, 1, 1, 1, 1))
    _, _, table = two_stage_score([77.4], [52.7])
    m1, m2, counter = two_stage_score([100.0, 0.0], [0.0, 100.0])
    secs = time.time() - t0
    ok = (agree["nc"] >= 0.99 * n and agree["ttc"] >= 0.99 * n and worst_gap <= 0.02 and hand == 84.375
          and round(table, 1) == 40.8 and (m1, m2, counter) == (50.0, 50.0, 0.0) and secs < 120)
    acceptance_record(2, ok, f"NC agree {agree['nc']}/{n}, TTC agree {agree['ttc']}/{n}, worst disagreement "
                             f"{100 * worst_gap:.2f} cm from tangency; 84.375 -> {hand}; 77.4/52.7 -> {table:.4f}; "
                             f"(100,0)/(0,100) -> means ({m1}, {m2}), final {counter}; {secs:.0f}s")
    assert ok


# --- 3 ------------------------------------------------------------------------

def test_criterion_03_ddpm_statistics(acceptance_record):
    t0 = time.time()
    s = make_schedule(100)
    eps = np.random.default_rng(3).standard_normal((100_000, X_DIM))
    var = q_sample(np.zeros(X_DIM), 50, eps, s).var(axis=0)
    var_err = float(np.max(np.abs(var / (1 - s.alpha_bar(50)) - 1)))
    m = GeneratorModel.create(16, 0, hidden=32)
    rng = np.random.default_rng(4)
    wp = rng.normal(size=(1000, T_WP, 3)).cumsum(axis=1)
    m.fit_normalization(wp)
    loss, _ = generator_loss(m, rng.normal(size=(1000, 16)), wp, rng)
    mono = bool(np.all(np.diff(s.alpha_bars) < 0)) and s.T == 100
    secs = time.time() - t0
    ok = var_err < 0.02 and abs(loss - 1) < 0.05 and mono and secs < 120
    acceptance_record(3, ok, f"q_sample variance max rel err {100 * var_err:.2f}% (t=50, 1e5 draws), "
                             f"untrained eps-loss {loss:.4f}, alpha_bar monotone over T=100: {mono}; {secs:.0f}s")
    assert ok


# --- 4 ------------------------------------------------------------------------

def test_criterion_04_refined_targets(acceptance_record):
    rng = np.random.default_rng(5)
    gt, teacher, delta = rng.random(10_000), rng.random(10_000), rng.random(10_000)
    out = refine_targets(gt, teacher, delta)
    worst = float(np.max(np.abs(out - gt) - delta))
    example = float(refine_targets(1.0, 0.2, 0.3))
    ok = worst <= 0 and example == 0.7
    acceptance_record(4, ok, f"max(|y~ - y| - delta) = {worst:.3f} over 1e4 triples; (1, 0.2, 0.3) -> {example!r}")
    assert ok


# --- 5 ------------------------------------------------------------------------

def test_criterion_05_vocabulary(acceptance_record):
    t0 = time.time()
    rng = np.random.default_rng(6)
    sizes = {k: len(dropout_indices(k, 0.5, rng)) for k in (1024, 512, 1023, 7)}
    size_ok = all(v == math.ceil(k / 2) for k, v in sizes.items())
    idx = dropout_indices(1024, 0.5, rng)
    order_ok = bool(np.all(np.diff(idx) > 0))
    a = build_vocabulary(2048, 128, seed=11)
    b = build_vocabulary(2048, 128, seed=11)
    det_ok = np.array_equal(a.trajectories, b.trajectories)
    vl = Vocabulary(a.trajectories, "L")
    dp = Vocabulary(sample_kinematic_batch(rng, 100), "DP")
    merged = merge(dp, vl)
    merge_ok = len(merged) == len(vl) + 100 and np.array_equal(merged.trajectories[len(vl):], dp.trajectories)
    secs = time.time() - t0
    ok = size_ok and order_ok and det_ok and merge_ok and secs < 60
    acceptance_record(5, ok, f"dropout sizes {sizes}, order kept {order_ok}, merged {len(merged)} = "
                             f"{len(vl)} + 100, build deterministic {det_ok}; {secs:.0f}s")
    assert ok


# --- 6-10: pipeline runs --------------------------------------------------------

def test_criterion_06_scorer_beats_random(pipelines, acceptance_record):
    lines, wins = [], 0
    for seed, run in pipelines.items():
        rep = run["reports"]["dense_dropout@dp"]
        ours, rnd = rep["final"], rep["baselines"]["random_dp"]["final"]
        oracle = rep["baselines"]["oracle"]["final"]
        assert oracle > rnd
        wins += ours - rnd >= 5.0
        lines.append(f"s{seed}: {ours:.1f} vs {rnd:.1f} ({ours - rnd:+.1f})")
    ok = wins == len(SEEDS)
    acceptance_record(6, ok, f"dense scorer on DP proposals vs random DP pick, final EPDMS: {'; '.join(lines)}; "
                             f"{wins}/{len(SEEDS)} seeds >= +5")
    assert ok


def test_criterion_07_dropout_generalization(pipelines, acceptance_record):
    lines, wins = [], 0
    for seed, run in pipelines.items():
        drop = run["reports"]["dense_dropout@dp+l"]["stage2_mean"]
        full = run["reports"]["dense_full@dp+l"]["stage2_mean"]
        wins += drop >= full
        lines.append(f"s{seed}: {drop:.1f} vs {full:.1f}")
    ok = wins >= 2
    acceptance_record(7, ok, f"stage-2 EPDMS with vs without vocabulary dropout: {'; '.join(lines)}; "
                             f"{wins}/{len(SEEDS)} seeds")
    assert ok


def test_criterion_08_augmentation_robustness(pipelines, acceptance_record):
    lines, wins = [], 0
    for seed, run in pipelines.items():
        a, b = run["reports"]["aug@dp+l"], run["reports"]["baseline_l@dp+l"]
        da = a["stage1_mean"] - a["stage2_mean"]
        db = b["stage1_mean"] - b["stage2_mean"]
        wins += da < db
        lines.append(f"s{seed}: {da:.1f} vs {db:.1f}")
    ok = wins >= 2
    acceptance_record(8, ok, f"stage-1 minus stage-2 degradation, augmented vs baseline: {'; '.join(lines)}; "
                             f"{wins}/{len(SEEDS)} seeds")
    assert ok


def test_criterion_09_ensemble(pipelines, acceptance_record):
    lines, ok = [], True
    run0 = pipelines[0]
    solo = harness.cmd_eval(run0["cfg"], ["dense_full"], "xl", name="solo@xl")
    pair = harness.cmd_eval(run0["cfg"], ["dense_full", "dense_full"], "xl", name="self-pair@xl")
    identity = [r["epdms"] for r in solo["per_scene"]] == [r["epdms"] for r in pair["per_scene"]]
    ok &= identity
    for seed, run in pipelines.items():
        r = run["reports"]
        members = [r[f"{n}@dp+l"]["final"] for n in ("dense_dropout", "dense_full", "aug", "aug_b")]
        ens = r["ensemble@dp+l"]["final"]
        listed = any(row["method"].startswith("ensemble") for row in run["rows"])
        ok &= ens >= min(members) and listed
        lines.append(f"s{seed}: {ens:.1f} (members {min(members):.1f}..{max(members):.1f})")
    acceptance_record(9, ok, f"self-ensemble identity {identity}; 2 dense + 2 aug ensemble final: {'; '.join(lines)}")
    assert ok


def test_criterion_10_reproducibility(pipelines, tmp_path_factory, acceptance_record):
    first = pipelines[0]["cfg"]
    t0 = time.time()
    again = pipeline_config(0, tmp_path_factory.mktemp("seed0_again"))
    harness.run_roadmap(again)
    a, b = harness.paths_for(first).root, harness.paths_for(again).root
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.suffix in (".json", ".txt", ".csv", ".png", ".jsonl")
                   and "solo" not in p.name and "self-pair" not in p.name)
    files = [f for f in files if f.name != "config.json"]
    differing = [str(f) for f in files if not (b / f).exists() or not filecmp.cmp(a / f, b / f, shallow=False)]
    ok = not differing and len(files) > 0
    acceptance_record(10, ok, f"{len(files)} artifact files compared byte for byte, {len(differing)} differ "
                              f"(rerun {time.time() - t0:.0f}s, first run {pipelines[0]['seconds']:.0f}s)")
    assert ok, differing[:10]
