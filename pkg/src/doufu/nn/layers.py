"""Layers built on the tape: linear, layer norm, attention, encoder layer, GRU cell."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


def softmax_rows(x) -> Tensor:
    return T.softmax(x, axis=-1)


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, bias: bool = True,
                 init: str = "uniform"):
        self.W = store.add(f"{name}.W", (d_in, d_out), init, fan_in=d_in)
        self.b = store.add(f"{name}.b", (d_out,), "zeros") if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int, eps: float = 1e-5):
        if d < 2:
            raise ValueError("layer norm needs d >= 2")
        self.gain = store.add(f"{name}.gain", (d,), "ones")
        self.bias = store.add(f"{name}.bias", (d,), "zeros")
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


def attention(Q, K, V, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over the last two axes; ``mask[..., a, b]`` marks allowed keys."""
    d = Q.shape[-1]
    scores = T.matmul(Q, T.transpose(K)) * (1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("attention mask leaves a query row with no allowed key")
    w = T.softmax(scores, axis=-1, mask=mask)
    return T.matmul(w, V)


def key_mask(valid: np.ndarray) -> np.ndarray:
    """[B, L] validity -> [B, 1, 1, L] key mask for multi-head scores [B, h, L, L]."""
    return valid[:, None, None, :]


class MultiHeadSelfAttention:
    def __init__(self, store: ParamStore, name: str, d: int, heads: int):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.d, self.h = d, heads
        self.qkv = Linear(store, f"{name}.qkv", d, 3 * d)
        self.out = Linear(store, f"{name}.out", d, d)

    def __call__(self, x, valid=None):
        # x: [B, L, d]; valid: [B, L] booleans
        B, L, d = x.shape
        h, dh = self.h, d // self.h
        qkv = self.qkv(x)
        qkv = T.transpose(T.reshape(qkv, (B, L, 3, h, dh)), (2, 0, 3, 1, 4))  # [3, B, h, L, dh]
        q, k, v = qkv[0], qkv[1], qkv[2]
        mask = key_mask(valid) if valid is not None else None
        ctx = attention(q, k, v, mask)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
        return self.out(ctx)


class FeedForward:
    def __init__(self, store: ParamStore, name: str, d: int, d_ff: int, d_out: int | None = None):
        self.l1 = Linear(store, f"{name}.l1", d, d_ff)
        self.l2 = Linear(store, f"{name}.l2", d_ff, d_out or d)

    def __call__(self, x):
        return self.l2(T.relu(self.l1(x)))


class TransformerEncoderLayer:
    """Post-norm encoder layer: LN(x + MHA(x)), then LN(x' + FF(x'))."""

    def __init__(self, store: ParamStore, name: str, d: int = 64, heads: int = 4, d_ff: int = 128):
        self.attn = MultiHeadSelfAttention(store, f"{name}.attn", d, heads)
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        self.ff = FeedForward(store, f"{name}.ff", d, d_ff)
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)

    def __call__(self, x, valid=None):
        x1 = self.ln1(x + self.attn(x, valid))
        return self.ln2(x1 + self.ff(x1))


class GRUCell:
    """z = s(xWz + hUz + bz), r = s(xWr + hUr + br), n = tanh(xWn + r*(hUn) + bn),
    h' = (1 - z) * n + z * h."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_h: int):
        self.d_h = d_h
        self.W = store.add(f"{name}.W", (d_in, 3 * d_h), fan_in=d_in)
        self.U = store.add(f"{name}.U", (d_h, 3 * d_h), fan_in=d_h)
        self.b = store.add(f"{name}.b", (3 * d_h,), "zeros")

    def __call__(self, x, h):
        d = self.d_h
        xw = T.matmul(x, self.W) + self.b
        hu = T.matmul(h, self.U)
        z = T.sigmoid(xw[..., :d] + hu[..., :d])
        r = T.sigmoid(xw[..., d:2 * d] + hu[..., d:2 * d])
        n = T.tanh(xw[..., 2 * d:] + r * hu[..., 2 * d:])
        return (1.0 - z) * n + z * h


def rnn_cell_step(x, h, cell: GRUCell):
    return cell(x, h)


def run_gru(cell: GRUCell, x, valid: np.ndarray) -> Tensor:
    """Run over [B, L, d_in] honouring per-row lengths; returns the last valid state [B, d_h]."""
    B, L, _ = x.shape
    h = Tensor(np.zeros((B, cell.d_h)))
    for t in range(L):
        h_new = cell(x[:, t, :], h)
        h = T.where(valid[:, t:t + 1], h_new, h)
    return h


def sinusoidal_positions(L: int, d: int) -> np.ndarray:
    pos = np.arange(L)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
