import math

import numpy as np
import pytest

from trajscore.geometry import T_WP, sample_kinematic_batch
from trajscore.vocab import (
    Vocabulary, build_vocabulary, cluster_vocabulary, dropout_indices, dropout_vocab, inertia, kmeans,
    merge, nested_vocabulary,
)


@pytest.fixture(scope="module")
def samples():
    return sample_kinematic_batch(np.random.default_rng(0), 2048)


def flat(wp):
    return wp[..., :2].reshape(len(wp), -1)


def test_k_equals_n_returns_sample_set(samples):
    x = samples[:64]
    v = cluster_vocabulary(x, 64, seed=1, tag="XL")
    assert np.array_equal(v.trajectories, x)
    assert np.array_equal(v.source_indices, np.arange(64))


def test_inertia_decreases_with_k(samples):
    x = flat(samples)
    rng = np.random.default_rng(2)
    c64, _, i64 = kmeans(x, 64, rng)
    c512, _, i512 = kmeans(x, 512, np.random.default_rng(2))
    assert i512 <= i64
    # independent recomputation
    def brute(c):
        return float(sum(np.min(((row - c) ** 2).sum(axis=1)) for row in x))
    assert inertia(x, c64) == pytest.approx(brute(c64), rel=1e-9)
    assert inertia(x, c512) == pytest.approx(brute(c512), rel=1e-9)


def test_members_are_real_distinct_samples(samples):
    v = cluster_vocabulary(samples, 128, seed=3, tag="XL")
    assert len(v) == 128
    assert len(set(v.source_indices.tolist())) == 128
    assert np.array_equal(v.trajectories, samples[v.source_indices])
    assert np.all(np.diff(v.source_indices) > 0)


def test_build_deterministic_and_sizes():
    a = build_vocabulary(1024, 64, seed=5)
    b = build_vocabulary(1024, 64, seed=5)
    assert np.array_equal(a.trajectories, b.trajectories)
    assert a.trajectories.shape == (64, T_WP, 3)
    with pytest.raises(ValueError):
        build_vocabulary(10, 11, seed=0)
    with pytest.raises(ValueError):
        build_vocabulary(10, 0, seed=0)


def test_nested_vocabulary_indexes_parent():
    xl = build_vocabulary(1024, 128, seed=6, tag="XL")
    l = nested_vocabulary(xl, 64, seed=6)
    assert l.tag == "L" and len(l) == 64
    assert np.array_equal(l.trajectories, xl.trajectories[l.source_indices])


def test_dropout_examples():
    rng = np.random.default_rng(0)
    assert len(dropout_indices(1024, 0.5, rng)) == 512
    assert len(dropout_indices(1023, 0.5, rng)) == math.ceil(1023 / 2)
    assert np.array_equal(dropout_indices(100, 0.0, rng), np.arange(100))
    a = dropout_indices(1024, 0.5, np.random.default_rng(9))
    b = dropout_indices(1024, 0.5, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert np.all(np.diff(a) > 0)
    with pytest.raises(ValueError):
        dropout_indices(10, 1.0, rng)


def test_dropout_vocab_preserves_order(samples):
    v = Vocabulary(samples[:1024], "XL")
    d = dropout_vocab(v, 0.5, np.random.default_rng(1))
    assert len(d) == 512
    assert np.array_equal(d.trajectories, v.trajectories[d.source_indices])
    assert np.array_equal(dropout_vocab(v, 0.0, np.random.default_rng(1)).trajectories, v.trajectories)


def test_merge_examples(samples):
    vl = Vocabulary(samples[:512], "L")
    vdp = Vocabulary(samples[1000:1100], "DP")
    m = merge(vdp, vl)
    assert len(m) == 612 and m.tag == "MERGED"
    assert np.array_equal(m.trajectories[:512], vl.trajectories)
    assert np.array_equal(m.trajectories[512:], vdp.trajectories)
    empty = Vocabulary(np.zeros((0, T_WP, 3)), "DP")
    assert np.array_equal(merge(empty, vl).trajectories, vl.trajectories)


def test_json_roundtrip(tmp_path, samples):
    v = Vocabulary(samples[:10], "XL", seed=4, source_indices=np.arange(10), meta={"x": 1})
    v.save(tmp_path / "v.json")
    w = Vocabulary.load(tmp_path / "v.json")
    assert np.array_equal(w.trajectories, v.trajectories) and w.tag == "XL" and w.meta == {"x": 1}
    d = v.to_json()
    d["k"] = 9
    with pytest.raises(ValueError):
        Vocabulary.from_json(d)
    with pytest.raises(ValueError):
        Vocabulary(samples[:2], "XXL")
