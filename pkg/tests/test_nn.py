import numpy as np
import pytest

from trajscore.nn import (
    MLP, AdamState, AttnBlock, EmaShadow, ParamStore, StaleCacheError, adam_step, attn_forward, backward,
    bce_with_logits, ema_update, grad_check, mlp_forward, soft_cross_entropy, softmax,
)


def make_mlp(sizes, act="tanh", seed=0):
    p = ParamStore(seed)
    net = MLP("m", sizes, act)
    net.init(p, np.random.default_rng(seed))
    return p, net


def test_zero_weights_zero_output():
    p, net = make_mlp((4, 5, 3))
    for a in p.arrays.values():
        a[:] = 0
    y, _ = mlp_forward(p, np.ones((2, 4)), net)
    assert np.all(y == 0)


def test_identity_layer():
    p, net = make_mlp((3, 3))
    p.arrays["m.0.W"][:] = np.eye(3)
    p.arrays["m.0.b"][:] = 0
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.array_equal(mlp_forward(p, x, net)[0], x)


def test_forward_matches_hand_rolled_3_4_2():
    p, net = make_mlp((3, 4, 2))
    W0, b0, W1, b1 = (p[k] for k in ("m.0.W", "m.0.b", "m.1.W", "m.1.b"))
    x = np.array([0.3, -1.2, 0.5])
    h = [np.tanh(sum(x[i] * W0[i, j] for i in range(3)) + b0[j]) for j in range(4)]
    y = [sum(h[j] * W1[j, k] for j in range(4)) + b1[k] for k in range(2)]
    assert np.allclose(mlp_forward(p, x[None], net)[0][0], y, atol=1e-14)


def make_attn(seed=0, width=6, hidden=7):
    p = ParamStore(seed)
    blk = AttnBlock("a", width, hidden)
    blk.init(p, np.random.default_rng(seed))
    return p, blk


def test_attention_single_context_and_duplicates():
    p, blk = make_attn()
    rng = np.random.default_rng(2)
    q = rng.normal(size=(4, 6))
    out, cache = attn_forward(p, blk, q, rng.normal(size=(1, 6)))
    assert np.array_equal(cache.data["attn"], np.ones((4, 1)))
    qd = np.vstack([q, q[1:2]])
    out2, _ = attn_forward(p, blk, qd, rng.normal(size=(3, 6)))
    assert np.array_equal(out2[1], out2[4])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    for _ in range(100):
        z = rng.normal(scale=rng.uniform(0.1, 50), size=(rng.integers(1, 9), rng.integers(1, 40)))
        assert np.max(np.abs(softmax(z).sum(axis=-1) - 1.0)) <= 1e-9
    p, blk = make_attn()
    _, c = attn_forward(p, blk, rng.normal(size=(5, 6)), rng.normal(size=(8, 6)))
    assert np.max(np.abs(c.data["attn"].sum(axis=1) - 1)) <= 1e-9


def test_zero_grad_and_bias_grad():
    p, net = make_mlp((3, 4, 2))
    x = np.random.default_rng(4).normal(size=(6, 3))
    y, c = mlp_forward(p, x, net)
    g, dx = backward(c, np.zeros_like(y))
    assert all(np.all(v == 0) for v in g.values()) and np.all(dx == 0)
    p1, lin = make_mlp((3, 2))
    y, c = mlp_forward(p1, x[:1], lin)
    g, _ = backward(c, np.ones_like(y))
    assert np.array_equal(g["m.0.b"], np.ones(2))


def test_stale_cache_rejected():
    p, net = make_mlp((3, 2))
    y, c = mlp_forward(p, np.ones((1, 3)), net)
    adam_step(p, {"m.0.b": np.ones(2)}, AdamState())
    with pytest.raises(StaleCacheError):
        backward(c, np.ones_like(y))


@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_mlp_grad_check(act):
    p, net = make_mlp((5, 7, 3), act, seed=5)
    rng = np.random.default_rng(5)
    x, target = rng.normal(size=(4, 5)), rng.normal(size=(4, 3))

    def loss():
        return float(np.sum((mlp_forward(p, x, net)[0] - target) ** 2))

    y, c = mlp_forward(p, x, net)
    g, _ = backward(c, 2 * (y - target))
    assert max(grad_check(loss, p, g).values()) < 1e-4


def test_attention_grad_check_including_inputs():
    p, blk = make_attn(6)
    rng = np.random.default_rng(6)
    q, ctx, w = rng.normal(size=(3, 6)), rng.normal(size=(4, 6)), rng.normal(size=(3, 6))

    def loss(qq=None, cc=None):
        return float(np.sum(attn_forward(p, blk, q if qq is None else qq, ctx if cc is None else cc)[0] * w))

    _, c = attn_forward(p, blk, q, ctx)
    g, (dq, dctx) = backward(c, w)
    assert max(grad_check(loss, p, g).values()) < 1e-4
    h = 1e-5
    for arr, analytic, key in ((q, dq, "qq"), (ctx, dctx, "cc")):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            up, dn = arr.copy(), arr.copy()
            up[idx] += h
            dn[idx] -= h
            num[idx] = (loss(**{key: up}) - loss(**{key: dn})) / (2 * h)
        assert np.linalg.norm(num - analytic) / (np.linalg.norm(num) + np.linalg.norm(analytic)) < 1e-4


def test_loss_gradients():
    rng = np.random.default_rng(7)
    z, y = rng.normal(size=(5, 3)), rng.random((5, 3))
    l, g = bce_with_logits(z, y)
    h = 1e-6
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        up, dn = z.copy(), z.copy()
        up[idx] += h
        dn[idx] -= h
        num[idx] = (bce_with_logits(up, y)[0] - bce_with_logits(dn, y)[0]) / (2 * h)
    assert np.allclose(num, g, atol=1e-8)
    t = softmax(rng.normal(size=6))
    z = rng.normal(size=6)
    l, g = soft_cross_entropy(z, t)
    assert l == pytest.approx(-np.sum(t * np.log(softmax(z))), rel=1e-12)
    assert np.allclose(g, softmax(z) - t, atol=1e-12)


def test_adam_examples():
    p = ParamStore()
    p.add("w", np.array([0.7]))
    st = AdamState(lr=2e-4)
    adam_step(p, {"w": np.zeros(1)}, st)
    assert p["w"][0] == 0.7 and st.step == 1
    p2 = ParamStore()
    p2.add("w", np.array([0.7]))
    adam_step(p2, {"w": np.ones(1)}, AdamState(lr=2e-4))
    assert p2["w"][0] - 0.7 == pytest.approx(-2e-4, rel=1e-6)
    with pytest.raises(FloatingPointError, match="'w'"):
        adam_step(p2, {"w": np.array([np.nan])}, AdamState())


def test_adam_quadratic_monotone():
    p = ParamStore()
    p.add("x", np.array([3.0, -2.0]))
    st = AdamState(lr=0.05)
    A = np.diag([1.0, 4.0])
    losses = []
    for _ in range(100):
        x = p["x"]
        losses.append(float(x @ A @ x))
        adam_step(p, {"x": 2 * A @ x}, st)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_ema_closed_form():
    p = ParamStore()
    p.add("w", np.array([1.0, -3.0]))
    sh = EmaShadow(ParamStore(), 0.9)
    sh.params.add("w", np.zeros(2))
    ema_update(sh, p, 1.0)
    assert np.all(sh.params["w"] == 0)
    for k in range(1, 51):
        ema_update(sh, p)
        assert np.allclose(sh.params["w"] - p["w"], -(0.9 ** k) * p["w"], atol=1e-12)
    ema_update(sh, p, 0.0)
    assert np.array_equal(sh.params["w"], p["w"])


def test_paramstore_json_and_checksum():
    p, _ = make_mlp((3, 4, 2))
    q = ParamStore.from_json(p.to_json())
    assert q.checksum() == p.checksum()
    q.arrays["m.0.b"][0] += 1e-9
    assert q.checksum() != p.checksum()
