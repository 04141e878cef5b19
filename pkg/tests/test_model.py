import io
import math

import numpy as np
import pytest

from gradcheck import check_grads
from doufu.features import TrajFeatures
from doufu.nn import LayerNorm, ParamStore, Tensor
from doufu.nn import ops as T
from doufu.model import (VARIANTS, Batch, DouFuModel, GlobalEncoder, ModelConfig, ModelError,
                         Reduce, consistent_matrix, embed, fuse, make_batch, read_embeddings,
                         train, write_embeddings)

DIMS = {"D_m": 4, "D_r": 3, "D_z": 2, "D_g": 5}
SMALL = dict(d=8, heads=2, d_ff=12, depth=1, n_reduce=2, reduce_hidden=6, global_hidden=6,
             embed_dim=6, batch=4)


def ln_np(x, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(-1, keepdims=True) + eps)


def softmax_np(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def toy_feats(rng, n_per_user=2, users=("a", "b"), lengths=None):
    feats, table = [], {f"s{i}": rng.normal(size=DIMS["D_z"]) for i in range(6)}
    k = 0
    for u in users:
        for _ in range(n_per_user):
            lm, lr = lengths[k] if lengths else (int(rng.integers(2, 6)), int(rng.integers(1, 5)))
            segs = tuple(f"s{int(j)}" for j in rng.integers(0, 6, size=lr))
            feats.append(TrajFeatures(f"t{k}", u, rng.normal(size=(lm, DIMS["D_m"])),
                                      rng.normal(size=(lr, DIMS["D_r"])), rng.normal(size=DIMS["D_g"]), segs))
            k += 1
    return feats, table


# ------------------------------------------------------------------ consistent layer

def test_consistent_pooling_examples():
    P = consistent_matrix(6, 3)
    x = np.arange(6.0)
    np.testing.assert_allclose(P @ x, [0.5, 2.5, 4.5])
    assert (consistent_matrix(3, 5).argmax(1) == [0, 0, 1, 1, 2]).all()
    np.testing.assert_array_equal(consistent_matrix(4, 4), np.eye(4))
    np.testing.assert_allclose(consistent_matrix(7, 3).sum(1), 1.0)
    with pytest.raises(ModelError):
        consistent_matrix(0, 2)


# ------------------------------------------------------------------ fuse

def test_fuse_uniform_values():
    v = np.array([1.0, -2.0, 0.5, 3.0])
    Am = np.tile(v, (3, 1))
    out = fuse(Am, np.random.default_rng(0).normal(size=(3, 4))).data
    np.testing.assert_allclose(out, np.tile(ln_np(2 * v), (3, 1)), atol=1e-12)


def test_fuse_oracle():
    rng = np.random.default_rng(1)
    Am, Ar = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
    scores = Am @ Ar.T / math.sqrt(8)
    W = softmax_np(scores)
    expect = ln_np(W @ Am + Am)
    out, Wt = fuse(Am, Ar, return_weights=True)
    np.testing.assert_allclose(out.data, expect, atol=1e-12)
    np.testing.assert_allclose(Wt.data, W, atol=1e-12)
    with pytest.raises(ModelError):
        fuse(Am, Ar[:4])


def test_fuse_lengths_and_row_sums():
    rng = np.random.default_rng(2)
    for _ in range(100):
        lm, lr = int(rng.integers(1, 40)), int(rng.integers(1, 40))
        Am_c = consistent_matrix(lm, lr) @ rng.normal(size=(lm, 6))
        out, W = fuse(Am_c, rng.normal(size=(lr, 6)), return_weights=True)
        assert out.shape == (lr, 6)
        np.testing.assert_allclose(W.data.sum(-1), 1.0, atol=1e-12)


def test_fuse_grad():
    rng = np.random.default_rng(3)
    store = ParamStore(0)
    ln = LayerNorm(store, "ln", 4)
    ln.gain.data, ln.bias.data = rng.normal(size=4), rng.normal(size=4)
    Am = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    Ar = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    valid = np.array([[1, 1, 1], [1, 1, 0]], bool)
    w = rng.normal(size=(2, 3, 4))
    f = lambda: T.tsum(fuse(Am, Ar, valid, ln) * w)
    assert check_grads(f, [Am, Ar, ln.gain, ln.bias]) < 1e-4


# ------------------------------------------------------------------ reduce

def test_reduce_constant_logits_is_mean():
    store = ParamStore(0)
    r = Reduce(store, "r", 4, 1, 3)
    store["r.0.mlp2.W"].data[...] = 0
    X = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(r(X).data, ln_np(X.mean(0)), atol=1e-12)


def test_reduce_single_row():
    r = Reduce(ParamStore(4), "r", 4, 3, 5)
    x = np.random.default_rng(1).normal(size=(1, 4))
    np.testing.assert_allclose(r(x).data, 3 * ln_np(x[0]), atol=1e-12)


def test_reduce_oracle_and_padding():
    store = ParamStore(2)
    r = Reduce(store, "r", 4, 2, 3)
    X = np.random.default_rng(2).normal(size=(6, 4))
    expect = 0
    for i in range(2):
        W1, b1 = store[f"r.{i}.mlp1.W"].data, store[f"r.{i}.mlp1.b"].data
        W2, b2 = store[f"r.{i}.mlp2.W"].data, store[f"r.{i}.mlp2.b"].data
        a = softmax_np((np.tanh(X @ W1 + b1) @ W2 + b2)[:, 0])
        expect = expect + ln_np(a @ X)
    np.testing.assert_allclose(r(X).data, expect, atol=1e-12)
    padded = np.concatenate([X, 1e3 * np.ones((3, 4))])[None]
    valid = np.array([[True] * 6 + [False] * 3])
    np.testing.assert_allclose(r(padded, valid).data[0], expect, atol=1e-12)


def test_reduce_grad():
    rng = np.random.default_rng(5)
    store = ParamStore(5)
    r = Reduce(store, "r", 4, 2, 3)
    X = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    valid = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], bool)
    w = rng.normal(size=(2, 4))
    f = lambda: T.tsum(r(X, valid) * w)
    # the output bias of each scoring MLP shifts all logits equally: softmax is blind to it
    shift = [p for k, p in store.items() if k.endswith("mlp2.b")]
    rest = [p for k, p in store.items() if not k.endswith("mlp2.b")]
    assert check_grads(f, [X] + rest) < 1e-4
    check_grads(f, shift)
    assert all(np.abs(p.grad).max() < 1e-12 for p in shift)


# ------------------------------------------------------------------ global encoder

def test_global_encoder_oracle():
    store = ParamStore(1)
    enc = GlobalEncoder(store, "g", 5, 7, 3)
    g = np.random.default_rng(0).normal(size=(2, 5))
    h = np.maximum(g @ store["g.l1.W"].data + store["g.l1.b"].data, 0)
    np.testing.assert_allclose(enc(g).data, h @ store["g.l2.W"].data + store["g.l2.b"].data, atol=1e-12)
    for p in store.params.values():
        p.data[...] = 0
    assert not enc(g).data.any()
    with pytest.raises(ModelError):
        enc(np.zeros((2, 4)))


# ------------------------------------------------------------------ full model

def _model(variant, seed=0, **kw):
    return DouFuModel(ModelConfig(variant=variant, seed=seed, **{**SMALL, **kw}), DIMS, ["a", "b"])


def _batch(seed=0):
    feats, table = toy_feats(np.random.default_rng(seed))
    return make_batch(feats, table, DIMS["D_z"], [0, 0, 1, 1]), feats, table


def test_routing_ignores_unused_inputs():
    b, _, _ = _batch()
    rng = np.random.default_rng(9)

    def perturbed(**fields):
        return Batch(**{**b.__dict__, **fields})

    m = _model("global_only")
    base = m.forward(b)["embedding"].data
    other = perturbed(movement=rng.normal(size=b.movement.shape), route=rng.normal(size=b.route.shape))
    np.testing.assert_array_equal(m.forward(other)["embedding"].data, base)
    m = _model("rnn_move")
    np.testing.assert_array_equal(m.forward(perturbed(route=rng.normal(size=b.route.shape)))["embedding"].data,
                                  m.forward(b)["embedding"].data)
    m = _model("rnn_route")
    np.testing.assert_array_equal(m.forward(perturbed(movement=rng.normal(size=b.movement.shape)))["embedding"].data,
                                  m.forward(b)["embedding"].data)
    m = _model("attention_fusion")
    np.testing.assert_array_equal(m.forward(perturbed(global_=rng.normal(size=b.global_.shape)))["embedding"].data,
                                  m.forward(b)["embedding"].data)


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_forward(variant):
    b, _, _ = _batch()
    out = _model(variant).forward(b)
    assert out["embedding"].shape == (4, SMALL["embed_dim"])
    assert out["fusion_logits"].shape == (4, 2)
    assert np.isfinite(_model(variant).loss(b).item())


def _ce(logits, y):
    lp = logits - logits.max(1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(1, keepdims=True))
    return -lp[np.arange(len(y)), y].mean()


def test_loss_factors():
    b, _, _ = _batch()
    y = b.labels
    m0 = _model("double_fusion", alpha=0.0, beta=0.0)
    out = m0.forward(b)
    assert m0.loss(b).item() == pytest.approx(_ce(out["fusion_logits"].data, y), rel=1e-12)
    m1 = _model("double_fusion", alpha=1.0, beta=1.0)
    out = m1.forward(b)
    expect = sum(_ce(out[k].data, y) for k in ("fusion_logits", "move_logits", "route_logits"))
    assert m1.loss(b).item() == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ModelError):
        m1.loss(Batch(**{**b.__dict__, "labels": np.array([0, 1, 2, 0])}))


@pytest.mark.parametrize("variant", ["double_fusion", "rnn_fusion"])
def test_forward_loss_grad(variant):
    b, _, _ = _batch(1)
    m = _model(variant, seed=1)
    params = list(m.store.params.values())
    assert check_grads(lambda: m.loss(b), params) < 1e-4


def test_embed_dim_constant_across_lengths():
    rng = np.random.default_rng(4)
    m = _model("double_fusion")
    for L in range(5, 51):
        feats, table = toy_feats(rng, 1, lengths=[(L, max(1, L // 3)), (max(1, 55 - L), L)])
        assert embed(m, feats, table)[0].vector.shape == (SMALL["embed_dim"],)


def test_training_determinism_and_progress():
    feats, table = toy_feats(np.random.default_rng(6), 6)
    cfg = ModelConfig(**{**SMALL, "epochs": 30, "lr": 3e-3})
    a, b = train(feats, table, cfg), train(feats, table, cfg)
    assert a.history == b.history
    assert a.history[-1] < a.history[0]
    z = train(feats, table, cfg.replace(epochs=0)).model
    fresh = DouFuModel(cfg, z.dims, z.users)
    for k, p in fresh.store.items():
        np.testing.assert_array_equal(z.store[k].data, p.data)


def test_missing_segment_and_embedding_io():
    feats, table = toy_feats(np.random.default_rng(7))
    m = _model("double_fusion")
    embs = embed(m, feats, table)
    buf = io.StringIO()
    write_embeddings(embs, buf)
    back = read_embeddings(io.StringIO(buf.getvalue()))
    for a, b in zip(embs, back):
        assert (a.traj_id, a.user) == (b.traj_id, b.user)
        np.testing.assert_array_equal(a.vector, b.vector)
    del table[feats[0].segments[0]]
    with pytest.raises(ModelError):
        embed(m, feats, table)


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(variant="nope")
    with pytest.raises(ModelError):
        ModelConfig(d=10, heads=4)
    with pytest.raises(ModelError):
        DouFuModel(ModelConfig(**SMALL), DIMS, ["solo"])
