"""End-to-end acceptance checks. Each test records one PASS/FAIL line in the run summary."""
import os
import time
from itertools import product

import numpy as np
import pytest

from conftest import ACCEPTANCE
from gradcheck import check_grads
from doufu.cli import main
from doufu.core import Route
from doufu.evalkit import parse_records
from doufu.model import DouFuModel, ModelConfig, Reduce, consistent_matrix, embed, fuse, make_batch
from doufu.nn import (GRUCell, LayerNorm, Linear, ParamStore, Tensor, TransformerEncoderLayer,
                      attention, run_gru)
from doufu.nn import ops as T
from doufu.pipeline import ExperimentConfig, Workspace, run_stage
from doufu.roadgraph import (VgaeParams, build_graph, gcn_encode, link_auc, pretrain,
                            split_edges, stochastic_block_graph, vgae_loss)

import test_evalkit as ek
from test_model import DIMS, SMALL, toy_feats


def record(name, ok, detail):
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok


# ------------------------------------------------------------------ gradient suite

def _grad_cases(rng):
    leaf = lambda *s: Tensor(rng.normal(size=s), requires_grad=True)
    store = ParamStore(int(rng.integers(1000)))
    lin = Linear(store, "lin", 4, 3)
    x = leaf(3, 4)
    yield "linear", lambda: T.tsum(T.tanh(lin(x))), [x, lin.W, lin.b]
    ln = LayerNorm(store, "ln", 5)
    ln.gain.data, ln.bias.data = rng.normal(size=5), rng.normal(size=5)
    x5, w5 = leaf(3, 5), rng.normal(size=(3, 5))
    yield "layer_norm", lambda: T.tsum(ln(x5) * w5), [x5, ln.gain, ln.bias]
    s = leaf(3, 4)
    ws = rng.normal(size=(3, 4))
    yield "softmax", lambda: T.tsum(T.softmax(s) * ws), [s]
    q, k, v = leaf(2, 3, 4), leaf(2, 3, 4), leaf(2, 3, 4)
    wa = rng.normal(size=(2, 3, 4))
    yield "attention", lambda: T.tsum(attention(q, k, v) * wa), [q, k, v]
    enc_store = ParamStore(1)
    layer = TransformerEncoderLayer(enc_store, "enc", 4, 2, 6)
    xe = leaf(2, 3, 4)
    yield "encoder_layer", lambda: T.tsum(layer(xe) * wa), [xe] + list(enc_store.params.values())
    gstore = ParamStore(2)
    cell = GRUCell(gstore, "gru", 3, 4)
    xg = leaf(2, 3, 3)
    valid = np.array([[1, 1, 1], [1, 1, 0]], bool)
    wg = rng.normal(size=(2, 4))
    yield "recurrent_cell", lambda: T.tsum(run_gru(cell, xg, valid) * wg), [xg] + list(gstore.params.values())
    g = build_graph([Route(r) for r in [("A", "B", "C"), ("A", "D", "B"), ("C", "D")]],
                    feature_fn=lambda s: rng.normal(size=3), standardize=False)
    vp = VgaeParams(3, 2, 4, seed=3)
    neg = np.array([[0, 2], [2, 0], [3, 1], [1, 3], [0, 3]])
    yield "gcn_layers", lambda: vgae_loss(g, *gcn_encode(g, vp), 5, negatives=neg), [vp.W0, vp.W_mu, vp.W_logvar]
    Am, Ar = leaf(3, 4), leaf(3, 4)
    wf = rng.normal(size=(3, 4))
    yield "fuse", lambda: T.tsum(fuse(Am, Ar) * wf), [Am, Ar]
    rstore = ParamStore(3)
    red = Reduce(rstore, "r", 4, 2, 3)
    xr = leaf(5, 4)
    wr = rng.normal(size=4)
    rparams = [p for n, p in rstore.items() if not n.endswith("mlp2.b")]
    yield "reduce", lambda: T.tsum(red(xr) * wr), [xr] + rparams
    feats, table = toy_feats(rng)
    batch = make_batch(feats, table, DIMS["D_z"], [0, 0, 1, 1])
    model = DouFuModel(ModelConfig(**SMALL), DIMS, ["a", "b"])
    heads = [model.head_f.W, model.head_m.W, model.head_r.W, model.head_f.b, model.head_m.b, model.head_r.b]
    yield "ce_heads", lambda: model.loss(batch), heads


def test_gradient_suite():
    t0 = time.time()
    worst = {}
    for seed in range(3):
        for name, f, params in _grad_cases(np.random.default_rng(seed)):
            worst[name] = max(worst.get(name, 0.0), check_grads(f, params))
    dt = time.time() - t0
    top = max(worst, key=worst.get)
    ok = record("gradient suite", max(worst.values()) < 1e-4 and dt < 60,
                f"{len(worst)} ops, worst rel. error {worst[top]:.2e} ({top}), {dt:.1f}s")
    assert ok


# ------------------------------------------------------------------ metric oracles

def test_metric_oracles():
    t0 = time.time()
    cases = 0
    for n in range(1, 6):
        X = np.random.default_rng(n).normal(size=(n, 2))
        parts = list(ek.set_partitions(n))
        for a, b in product(parts, parts):
            if n == 1:
                continue
            ek._check_pair(X, a, b)
            cases += 1
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(6, 9))
        a = list(rng.integers(0, rng.integers(1, n + 1), size=n))
        b = list(rng.integers(0, rng.integers(1, n + 1), size=n))
        ek._check_pair(rng.normal(size=(n, 3)), a, b)
        cases += 1
    dt = time.time() - t0
    assert record("metric oracles", dt < 60, f"DB/NMI/ARI/ACC/F1 agree to 1e-9 on {cases} partition pairs, {dt:.1f}s")


# ------------------------------------------------------------------ transition graph fixture

def test_transition_graph_fixture():
    routes = [Route(r) for r in [("R1", "R2", "R3"), ("R1", "R2", "R4"), ("R1", "R5", "R2"),
                                 ("R2", "R4", "R5")]]
    g = build_graph(routes)
    want = {("R1", "R2"), ("R2", "R3"), ("R2", "R4"), ("R1", "R5"), ("R5", "R2"), ("R4", "R5")}
    ok = set(g.vertices) == {f"R{i}" for i in range(1, 6)} and set(g.edges) == want and len(g.edges) == 6
    assert record("four-route transition graph", ok, f"|V|={len(g.vertices)}, |E|={len(g.edges)}")


# ------------------------------------------------------------------ VGAE learning signal

def test_vgae_learning_signal():
    t0 = time.time()
    g = stochastic_block_graph(0)
    train_g, pos, neg = split_edges(g, 0.15, 0)
    trained = link_auc(pretrain(train_g, epochs=300, lr=0.01, seed=0).table, train_g, pos, neg)
    base = [link_auc(pretrain(train_g, epochs=0, seed=s).table, train_g, pos, neg) for s in range(10)]
    dt = time.time() - t0
    b = float(np.mean(base))
    ok_trained = trained >= 0.75
    ok_base = abs(b - 0.5) <= 0.05
    record("VGAE learning signal", ok_trained and ok_base and dt < 120,
           f"trained AUC {trained:.3f} (>= 0.75: {ok_trained}); untrained mean AUC {b:.3f} "
           f"over 10 seeds (0.5 +- 0.05: {ok_base}); {dt:.1f}s")
    assert ok_trained and dt < 120
    assert ok_base, f"untrained baseline {b:.3f} outside 0.5 +- 0.05"


# ------------------------------------------------------------------ ordering and clustering

@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    cfg = ExperimentConfig(workspace=str(tmp_path_factory.mktemp("default")))
    t0 = time.time()
    run_stage("all", cfg, log=lambda *_: None)
    dt = time.time() - t0
    ws = Workspace(cfg.workspace)
    recs = parse_records((ws.stage_dir("eval") / "report.csv").read_text())
    return recs, dt


def _vals(recs, variant, metric):
    return {s: v for (rv, m, v, s) in recs if rv == variant and m == metric}


def test_ordering_reproduction(default_run):
    recs, dt = default_run
    acc = {v: float(np.mean(list(_vals(recs, v, "logistic.acc").values())))
           for v in ("double_fusion", "attention_fusion", "rnn_fusion", "rnn_move", "rnn_route",
                     "global_only", "semantic_fusion")}
    singles = max(acc["rnn_move"], acc["rnn_route"], acc["global_only"])
    chain = acc["double_fusion"] > acc["attention_fusion"] >= acc["rnn_fusion"] > singles
    margin = acc["double_fusion"] - acc["rnn_fusion"]
    detail = ", ".join(f"{v} {a:.3f}" for v, a in sorted(acc.items(), key=lambda kv: -kv[1]))
    ok = record("variant ordering", chain and margin >= 0.05 and dt < 900,
                f"{detail}; ordering {'holds' if chain else 'violated'}, "
                f"DF - RNNF = {100 * margin:.1f} points (>= 5 needed); {dt:.0f}s")
    assert ok


def test_clustering_vs_untrained(default_run):
    recs, _ = default_run
    rows = []
    ok = True
    for seed in (0, 1, 2):
        t = {m: _vals(recs, "double_fusion", m)[seed] for m in ("db", "nmi", "ari")}
        u = {m: _vals(recs, "double_fusion@untrained", m)[seed] for m in ("db", "nmi", "ari")}
        ok &= t["db"] < u["db"] and t["nmi"] > u["nmi"] and t["ari"] > u["ari"]
        rows.append(f"s{seed} DB {t['db']:.2f}/{u['db']:.2f} NMI {t['nmi']:.3f}/{u['nmi']:.3f} "
                    f"ARI {t['ari']:.3f}/{u['ari']:.3f}")
    assert record("clustering vs untrained (trained/untrained)", ok, "; ".join(rows))


# ------------------------------------------------------------------ shape invariants

def test_shape_invariants():
    rng = np.random.default_rng(0)
    fuse_ok = sums_ok = True
    for _ in range(100):
        lm, lr = int(rng.integers(1, 60)), int(rng.integers(1, 60))
        out, W = fuse(consistent_matrix(lm, lr) @ rng.normal(size=(lm, 8)), rng.normal(size=(lr, 8)),
                      return_weights=True)
        fuse_ok &= out.shape == (lr, 8)
        sums_ok &= bool(np.allclose(W.data.sum(-1), 1.0, atol=1e-12))
    store = ParamStore(0)
    red = Reduce(store, "r", 8, 2, 4)
    for a in red.weights(rng.normal(size=(3, 7, 8))):
        sums_ok &= bool(np.allclose(a.data.sum(-1), 1.0, atol=1e-12))
    model = DouFuModel(ModelConfig(**SMALL), DIMS, ["a", "b"])
    dims = set()
    for L in range(5, 51):
        feats, table = toy_feats(rng, 1, lengths=[(L, max(1, L // 2)), (L, L)])
        dims |= {e.vector.shape for e in embed(model, feats, table)}
    ok = fuse_ok and sums_ok and dims == {(SMALL["embed_dim"],)}
    assert record("shape/normalization invariants", ok,
                  f"fuse rows = L_r on 100 pairs: {fuse_ok}; softmax rows sum to 1: {sums_ok}; "
                  f"embedding dims over lengths 5-50: {sorted(dims)}")


# ------------------------------------------------------------------ determinism

def test_all_twice_bit_identical(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[synthgen]\nn_users = 4\nper_user = 12\n[features]\ntrain_per_user = 8\n"
                   "[roadgraph]\nepochs = 30\n[model]\nepochs = 3\nseeds = 0,1\n"
                   "variants = double_fusion,rnn_fusion,global_only\n[eval]\nfolds = 2\n")
    outs = []
    for name in ("a", "b"):
        ws = tmp_path / name
        assert main(["all", "--config", str(cfg), "--workspace", str(ws), "-q"]) == 0
        blobs = {}
        for stage in ("embed", "eval"):
            for f in sorted(os.listdir(ws / stage)):
                if f.endswith(".csv") or f.endswith(".txt"):
                    blobs[f"{stage}/{f}"] = (ws / stage / f).read_bytes()
        outs.append(blobs)
    same = outs[0] == outs[1]
    assert record("determinism of `doufu all`", same,
                  f"{len(outs[0])} embedding/report files compared byte for byte")
