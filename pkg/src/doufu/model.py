"""DouFu network, its ablation variants, and the supervised training loop."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .features import TrajFeatures
from .nn import (GRUCell, LayerNorm, Linear, ParamStore, Tensor, TransformerEncoderLayer,
                 adam_step, backward, run_gru, sinusoidal_positions)
from .nn import ops as T

VARIANTS = ("double_fusion", "attention_fusion", "semantic_fusion", "rnn_fusion",
            "rnn_move", "rnn_route", "global_only")

# which inputs each variant reads, and with which sequence encoder
_ROUTING = {
    "double_fusion": ("attn", True, True, True),
    "attention_fusion": ("attn", True, True, False),
    "semantic_fusion": ("rnn", True, True, True),
    "rnn_fusion": ("rnn", True, True, False),
    "rnn_move": ("rnn", True, False, False),
    "rnn_route": ("rnn", False, True, False),
    "global_only": (None, False, False, True),
}


class ModelError(ValueError):
    pass


class NumericFailure(FloatingPointError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"training loss became non-finite ({value}) at epoch {epoch}")
        self.epoch = epoch


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    d_ff: int = 128
    depth: int = 2
    L_m_max: int = 512
    L_r_max: int = 256
    n_reduce: int = 2
    reduce_hidden: int = 32
    global_hidden: int = 64
    embed_dim: int = 64
    alpha: float = 0.5
    beta: float = 0.5
    variant: str = "double_fusion"
    epochs: int = 30
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0

    def __post_init__(self):
        errs = []
        if self.variant not in VARIANTS:
            errs.append(f"unknown variant {self.variant!r}")
        if self.alpha < 0 or self.beta < 0:
            errs.append("alpha and beta must be non-negative")
        if self.heads < 1 or self.d % self.heads:
            errs.append(f"d={self.d} not divisible by heads={self.heads}")
        for k in ("d", "d_ff", "n_reduce", "reduce_hidden", "global_hidden", "embed_dim",
                  "batch", "L_m_max", "L_r_max"):
            if getattr(self, k) < 1:
                errs.append(f"{k} must be positive")
        if self.depth < 0 or self.epochs < 0:
            errs.append("depth and epochs must be non-negative")
        if not self.lr > 0:
            errs.append("lr must be positive")
        if errs:
            raise ModelError("; ".join(errs))

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})


@dataclass
class Batch:
    movement: np.ndarray   # [B, L_m, D_m]
    m_valid: np.ndarray    # [B, L_m] bool
    route: np.ndarray      # [B, L_r, D_r + d_z]
    r_valid: np.ndarray
    global_: np.ndarray    # [B, D_g]
    labels: np.ndarray | None = None


@dataclass
class TrajectoryEmbedding:
    traj_id: str
    user: str
    vector: np.ndarray


# ------------------------------------------------------------------ building blocks

def consistent_matrix(L_m: int, L_r: int) -> np.ndarray:
    """[L_r, L_m] averaging matrix: adaptive mean pooling, or repetition when L_m < L_r."""
    if L_m < 1 or L_r < 1:
        raise ModelError("sequence lengths must be positive")
    P = np.zeros((L_r, L_m))
    for i in range(L_r):
        if L_m >= L_r:
            a = (i * L_m) // L_r
            b = -((-(i + 1) * L_m) // L_r)
            P[i, a:b] = 1.0 / (b - a)
        else:
            P[i, (i * L_m) // L_r] = 1.0
    return P


def consistent_pooling(m_valid: np.ndarray, r_valid: np.ndarray) -> np.ndarray:
    """Per-row pooling matrices padded to [B, L_r_pad, L_m_pad]."""
    B, Lm = m_valid.shape
    Lr = r_valid.shape[1]
    P = np.zeros((B, Lr, Lm))
    for b in range(B):
        lm, lr = int(m_valid[b].sum()), int(r_valid[b].sum())
        P[b, :lr, :lm] = consistent_matrix(lm, lr)
    return P


def fuse(Am_c, A_r, valid: np.ndarray | None = None, ln: LayerNorm | None = None,
         return_weights: bool = False):
    """LN(softmax(Am_c A_r^T / sqrt(d)) Am_c + Am_c); ``valid`` masks padded route keys."""
    Am_c, A_r = T.as_tensor(Am_c), T.as_tensor(A_r)
    if Am_c.shape != A_r.shape:
        raise ModelError(f"fuse shape mismatch: {Am_c.shape} vs {A_r.shape}")
    d = Am_c.shape[-1]
    scores = T.matmul(Am_c, T.transpose(A_r)) * (1.0 / math.sqrt(d))
    mask = None
    if valid is not None:
        mask = np.broadcast_to(np.asarray(valid, bool)[..., None, :], scores.shape)
    W = T.softmax(scores, axis=-1, mask=mask)
    pre = T.matmul(W, Am_c) + Am_c
    out = ln(pre) if ln is not None else T.layer_norm(pre, np.ones(d), np.zeros(d))
    return (out, W) if return_weights else out


class Reduce:
    """Sum over heads of LN(sum_j a_ij x_j) with a_i = softmax(MLP_i(X))."""

    def __init__(self, store: ParamStore, name: str, d: int, n_heads: int, hidden: int):
        self.heads = []
        for i in range(n_heads):
            self.heads.append((Linear(store, f"{name}.{i}.mlp1", d, hidden),
                               Linear(store, f"{name}.{i}.mlp2", hidden, 1),
                               LayerNorm(store, f"{name}.{i}.ln", d)))

    def weights(self, X, valid=None):
        X = T.as_tensor(X)
        lead = X.shape[:-1]
        out = []
        for l1, l2, _ in self.heads:
            logits = T.reshape(l2(T.tanh(l1(X))), lead)
            out.append(T.softmax(logits, axis=-1, mask=valid))
        return out

    def __call__(self, X, valid=None):
        X = T.as_tensor(X)
        total = None
        for (_, _, ln), a in zip(self.heads, self.weights(X, valid)):
            if X.ndim == 2:
                pooled = T.reshape(T.matmul(T.reshape(a, (1, -1)), X), (X.shape[-1],))
            else:
                pooled = T.reshape(T.matmul(T.reshape(a, (a.shape[0], 1, a.shape[1])), X),
                                   (X.shape[0], X.shape[-1]))
            h = ln(pooled)
            total = h if total is None else total + h
        return total


class SequenceEncoder:
    """Input projection, sinusoidal positions, then post-norm encoder layers."""

    def __init__(self, store, name, d_in, cfg: ModelConfig):
        self.proj = Linear(store, f"{name}.in", d_in, cfg.d)
        self.layers = [TransformerEncoderLayer(store, f"{name}.layer{i}", cfg.d, cfg.heads, cfg.d_ff)
                       for i in range(cfg.depth)]
        self.d = cfg.d

    def __call__(self, x, valid=None):
        x = T.as_tensor(x)
        if x.shape[-2] == 0:
            raise ModelError("empty sequence")
        h = self.proj(x) + Tensor(sinusoidal_positions(x.shape[-2], self.d))
        squeeze = h.ndim == 2
        if squeeze:
            h = T.reshape(h, (1,) + h.shape)
            valid = None if valid is None else np.asarray(valid)[None]
        for layer in self.layers:
            h = layer(h, valid)
        return T.reshape(h, h.shape[1:]) if squeeze else h


class GlobalEncoder:
    def __init__(self, store, name, d_in, hidden, d_out):
        self.l1 = Linear(store, f"{name}.l1", d_in, hidden)
        self.l2 = Linear(store, f"{name}.l2", hidden, d_out)
        self.d_in = d_in

    def __call__(self, g):
        g = T.as_tensor(g)
        if g.shape[-1] != self.d_in:
            raise ModelError(f"global feature has dimension {g.shape[-1]}, expected {self.d_in}")
        return self.l2(T.relu(self.l1(g)))


# ------------------------------------------------------------------ the model

class DouFuModel:
    def __init__(self, cfg: ModelConfig, dims: dict, users: Sequence[str]):
        """``dims`` holds D_m, D_r, D_z (pretrained embedding width) and D_g."""
        users = list(users)
        if len(users) < 2:
            raise ModelError("need at least two users")
        if len(set(users)) != len(users):
            raise ModelError("duplicate user labels")
        self.cfg, self.dims, self.users = cfg, dict(dims), users
        self.user_index = {u: i for i, u in enumerate(users)}
        store = self.store = ParamStore(cfg.seed)
        kind, use_m, use_r, use_g = _ROUTING[cfg.variant]
        self.kind, self.use_m, self.use_r, self.use_g = kind, use_m, use_r, use_g
        d, U = cfg.d, len(users)
        d_route = dims["D_r"] + dims["D_z"]
        width = 0
        if kind == "attn":
            self.enc_m = SequenceEncoder(store, "move_enc", dims["D_m"], cfg)
            self.enc_r = SequenceEncoder(store, "route_enc", d_route, cfg)
            self.reduce_m = Reduce(store, "move_reduce", d, cfg.n_reduce, cfg.reduce_hidden)
            self.reduce_r = Reduce(store, "route_reduce", d, cfg.n_reduce, cfg.reduce_hidden)
            if cfg.variant == "double_fusion":
                self.consistent = Linear(store, "consistent", d, d)
                # start as a pure pooling layer so fusion sees the encoder output unchanged
                self.consistent.W.data[...] = np.eye(d)
                self.fuse_ln = LayerNorm(store, "fuse_ln", d)
                self.reduce_f = Reduce(store, "fusion_reduce", d, cfg.n_reduce, cfg.reduce_hidden)
                width += d
            else:
                width += 2 * d
        elif kind == "rnn":
            if use_m:
                self.gru_m = GRUCell(store, "move_gru", dims["D_m"], d)
                width += d
            if use_r:
                self.gru_r = GRUCell(store, "route_gru", d_route, d)
                width += d
        if use_g:
            self.glob = GlobalEncoder(store, "global_enc", dims["D_g"], cfg.global_hidden, d)
            width += d
        self.merge = Linear(store, "merge", width, cfg.embed_dim)
        self.head_f = Linear(store, "head.fusion", cfg.embed_dim, U)
        self.head_m = Linear(store, "head.movement", d, U) if use_m else None
        self.head_r = Linear(store, "head.route", d, U) if use_r else None

    # -- forward
    def forward(self, batch: Batch) -> dict:
        cfg = self.cfg
        if batch.movement.shape[1] > cfg.L_m_max or batch.route.shape[1] > cfg.L_r_max:
            raise ModelError("sequence longer than the configured maximum")
        parts, out = [], {}
        side_m = side_r = None
        if self.kind == "attn":
            A_m = self.enc_m(batch.movement, batch.m_valid)
            A_r = self.enc_r(batch.route, batch.r_valid)
            side_m = self.reduce_m(A_m, batch.m_valid)
            side_r = self.reduce_r(A_r, batch.r_valid)
            if cfg.variant == "double_fusion":
                P = consistent_pooling(batch.m_valid, batch.r_valid)
                Am_c = self.consistent(T.matmul(P, A_m))
                fused, W = fuse(Am_c, A_r, batch.r_valid, self.fuse_ln, return_weights=True)
                out["fusion_weights"] = W
                parts.append(self.reduce_f(fused, batch.r_valid))
            else:
                parts += [side_m, side_r]
        elif self.kind == "rnn":
            if self.use_m:
                side_m = run_gru(self.gru_m, Tensor(batch.movement), batch.m_valid)
                parts.append(side_m)
            if self.use_r:
                side_r = run_gru(self.gru_r, Tensor(batch.route), batch.r_valid)
                parts.append(side_r)
        if self.use_g:
            parts.append(self.glob(batch.global_))
        merged = parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)
        emb = self.merge(merged)
        out["embedding"] = emb
        out["fusion_logits"] = self.head_f(emb)
        out["move_logits"] = self.head_m(side_m) if side_m is not None else None
        out["route_logits"] = self.head_r(side_r) if side_r is not None else None
        return out

    def loss(self, batch: Batch, out: dict | None = None):
        """L_fusion + alpha * L_move + beta * L_route over the streams the variant uses."""
        if batch.labels is None:
            raise ModelError("batch has no labels")
        y = np.asarray(batch.labels)
        if y.min() < 0 or y.max() >= len(self.users):
            raise ModelError("label outside the user range")
        out = out if out is not None else self.forward(batch)
        total = T.cross_entropy(out["fusion_logits"], y)
        if out["move_logits"] is not None and self.cfg.alpha:
            total = total + T.cross_entropy(out["move_logits"], y) * self.cfg.alpha
        if out["route_logits"] is not None and self.cfg.beta:
            total = total + T.cross_entropy(out["route_logits"], y) * self.cfg.beta
        return total

    # -- persistence
    def checkpoint_extra(self) -> dict:
        return {"config": asdict(self.cfg), "dims": self.dims, "users": self.users}

    @classmethod
    def from_checkpoint(cls, tensors: dict, extra: dict) -> "DouFuModel":
        m = cls(ModelConfig(**extra["config"]), extra["dims"], extra["users"])
        m.store.load_state(tensors)
        return m


# ------------------------------------------------------------------ data plumbing

def route_inputs(f: TrajFeatures, table: dict[str, np.ndarray], d_z: int) -> np.ndarray:
    missing = [s for s in f.segments if s not in table]
    if missing:
        raise ModelError(f"{f.traj_id}: segment {missing[0]!r} has no pretrained embedding")
    emb = np.stack([np.asarray(table[s], dtype=float) for s in f.segments]) if f.segments \
        else np.zeros((0, d_z))
    if emb.shape[1] != d_z:
        raise ModelError("embedding table width disagrees with the model")
    return np.concatenate([f.route, emb], axis=1)


def _pad(seqs: list[np.ndarray]):
    L = max(len(s) for s in seqs)
    D = seqs[0].shape[1]
    x = np.zeros((len(seqs), L, D))
    valid = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        x[i, :len(s)] = s
        valid[i, :len(s)] = True
    return x, valid


def make_batch(feats: Sequence[TrajFeatures], table: dict[str, np.ndarray], d_z: int,
               labels: Sequence[int] | None = None) -> Batch:
    if not feats:
        raise ModelError("empty batch")
    for f in feats:
        if len(f.movement) == 0 or len(f.route) == 0:
            raise ModelError(f"{f.traj_id}: empty movement or route sequence")
    mv, mval = _pad([f.movement for f in feats])
    rt, rval = _pad([route_inputs(f, table, d_z) for f in feats])
    g = np.stack([f.global_ for f in feats])
    return Batch(mv, mval, rt, rval, g, None if labels is None else np.asarray(labels))


def dims_for(feats: Sequence[TrajFeatures], table: dict[str, np.ndarray]) -> dict:
    f = feats[0]
    d_z = len(next(iter(table.values()))) if table else 0
    return {"D_m": f.movement.shape[1], "D_r": f.route.shape[1], "D_z": d_z,
            "D_g": f.global_.shape[0]}


@dataclass
class TrainResult:
    model: DouFuModel
    history: list[float] = field(default_factory=list)


def train(feats: Sequence[TrajFeatures], table: dict[str, np.ndarray], cfg: ModelConfig,
          users: Sequence[str] | None = None, log=None) -> TrainResult:
    """Mini-batch Adam on the joint loss; per-epoch shuffles derive from (seed, epoch)."""
    feats = list(feats)
    users = sorted({f.user for f in feats}) if users is None else list(users)
    model = DouFuModel(cfg, dims_for(feats, table), users)
    labels = np.array([model.user_index[f.user] for f in feats])
    history = []
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(feats))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch):
            idx = order[start:start + cfg.batch]
            batch = make_batch([feats[i] for i in idx], table, model.dims["D_z"], labels[idx])
            model.store.zero_grad()
            loss = model.loss(batch)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericFailure(epoch, value)
            backward(loss)
            adam_step(model.store, cfg.lr)
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        if log is not None:
            log(f"{cfg.variant} epoch {epoch}: loss {history[-1]:.4f}")
    return TrainResult(model, history)


def embed(model: DouFuModel, feats: Sequence[TrajFeatures], table: dict[str, np.ndarray],
          batch_size: int = 64) -> list[TrajectoryEmbedding]:
    out = []
    for start in range(0, len(feats), batch_size):
        chunk = list(feats[start:start + batch_size])
        z = model.forward(make_batch(chunk, table, model.dims["D_z"]))["embedding"].data
        if not np.all(np.isfinite(z)):
            raise NumericFailure(-1, float("nan"))
        out += [TrajectoryEmbedding(f.traj_id, f.user, z[i].copy()) for i, f in enumerate(chunk)]
    return out


def write_embeddings(embs: Sequence[TrajectoryEmbedding], sink) -> None:
    for e in embs:
        sink.write(f"{e.traj_id},{e.user}," + ",".join(repr(float(v)) for v in e.vector) + "\n")


def read_embeddings(source) -> list[TrajectoryEmbedding]:
    out = []
    for line in source:
        parts = line.strip().split(",")
        if len(parts) >= 3:
            out.append(TrajectoryEmbedding(parts[0], parts[1], np.array([float(v) for v in parts[2:]])))
    return out
