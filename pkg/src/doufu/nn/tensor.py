"""Dense float64 tensors with a reverse-mode tape.

Every op that touches a tensor with ``requires_grad`` records a :class:`TapeNode`
holding its inputs and a closure mapping the output gradient to input gradients.
:func:`backward` walks the nodes reachable from a scalar loss in reverse
topological order and then releases them, so a second backward over the same
graph is an error rather than a silent double count.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class TapeError(RuntimeError):
    pass


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    backward_fn: Callable | None
    consumed: bool = field(default=False)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __pow__(self, p): return power(self, p)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------------ elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def power(a, p: float):
    a = as_tensor(a)
    return _make(a.data ** p, "pow", (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, "relu", (a,), lambda g: (g * mask,))


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return _make(np.where(cond, a.data, b.data), "where", (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ------------------------------------------------------------------ reductions / shape

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    """Swap the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)
    return _make(a.data[idx], "getitem", (a,), bw)


def concat(ts: Sequence, axis: int = -1):
    ts = [as_tensor(t) for t in ts]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(ts: Sequence, axis: int = 0):
    ts = [as_tensor(t) for t in ts]
    return _make(np.stack([t.data for t in ts], axis=axis), "stack", tuple(ts),
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = (ad * g[..., None]).reshape(-1, bd.shape[0]).sum(axis=0)
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g if ad.ndim > 1 else np.multiply.outer(ad, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(a.data @ b.data, "matmul", (a, b), bw)


# ------------------------------------------------------------------ fused kernels

def softmax(a, axis: int = -1, mask=None):
    """Max-stabilized softmax. ``mask`` (broadcastable booleans) marks allowed entries."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=axis).all():
            raise ValueError("softmax row with every entry masked out")
        x = np.where(mask, x, -np.inf)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, "softmax", (a,), bw)


def log_softmax(a, axis: int = -1):
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse
    p = np.exp(out)
    return _make(out, "log_softmax", (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5):
    """Normalize over the last axis, then apply ``gain``/``bias`` if given."""
    x = as_tensor(x)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        return (inv / d * (d * g - g.sum(axis=-1, keepdims=True)
                           - xhat * (g * xhat).sum(axis=-1, keepdims=True)),)
    out = _make(xhat, "layer_norm", (x,), bw)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def cross_entropy(logits, labels, weights=None):
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be one integer per row")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"label outside [0, {c})")
    lp = log_softmax(logits, axis=-1)
    picked = lp[np.arange(n), labels]
    return -mean(picked)


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of sigmoid(logits) against constant 0/1 ``targets``."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    s = logits.data
    n = s.size
    val = np.mean(np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s))))
    return _make(np.asarray(val), "bce_with_logits", (logits,),
                 lambda g: (g * (_sigmoid(s) - y) / n,))


# ------------------------------------------------------------------ backward

def _topo(loss: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(loss, False)]
    while stack_:
        t, done = stack_.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack_.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf tensor that requires grad and release the tape."""
    if loss.data.size != 1:
        raise TapeError("backward needs a scalar loss")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
            return
        raise TapeError("loss does not depend on any parameter")
    if loss.node.consumed:
        raise TapeError("tape already consumed: run the forward pass again before backward")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if t.node.consumed:
            raise TapeError("tape already consumed: run the forward pass again before backward")
        in_grads = t.node.backward_fn(g)
        for inp, gi in zip(t.node.inputs, in_grads):
            if not inp.requires_grad or gi is None:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi
    for t in order:
        if t.node is not None:
            t.node.consumed = True
            t.node.backward_fn = None
