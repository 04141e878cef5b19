"""Named parameter store, Adam, and the checkpoint container format."""
from __future__ import annotations

import json
import math
from typing import BinaryIO

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"DOUFU-TENSORS-1\n"


class ParamStore:
    """Ordered, uniquely named trainable tensors with seeded initialization.

    Initialization draws from one generator in registration order, so the same
    construction sequence with the same seed reproduces the same values.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.meta: dict[str, dict] = {}
        self.moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def add(self, name: str, shape, init: str = "uniform", fan_in: int | None = None,
            value=None) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if value is not None:
            data = np.array(value, dtype=np.float64).reshape(shape)
            init = "given"
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "uniform":
            fan = fan_in if fan_in is not None else shape[0]
            bound = 1.0 / math.sqrt(max(fan, 1))
            data = self.rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        self.meta[name] = {"init": init, "seed": self.seed}
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unknown parameter {k!r}")
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {self.params[k].shape} vs {v.shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def n_values(self) -> int:
        return sum(p.data.size for p in self.params.values())


def adam_step(store: ParamStore, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamStore:
    """One bias-corrected Adam update in place; moments live in the store."""
    if all(p.grad is None for p in store.params.values()):
        raise RuntimeError("adam_step called before backward: no gradients populated")
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        if p.grad is None:
            continue
        m, v = store.moments.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = beta1 * m + (1.0 - beta1) * p.grad
        v = beta2 * v + (1.0 - beta2) * p.grad * p.grad
        store.moments[name] = (m, v)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def save_tensors(fh: BinaryIO, tensors: dict[str, np.ndarray], extra: dict | None = None,
                 seeds: dict[str, int] | None = None) -> None:
    """Write a manifest line (JSON) followed by the raw little-endian float64 payload."""
    entries = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f8",
                        "seed": (seeds or {}).get(name), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "extra": extra or {}}, sort_keys=True)
    fh.write(CHECKPOINT_MAGIC)
    fh.write(header.encode("utf-8") + b"\n")
    for arr in tensors.values():
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_tensors(fh: BinaryIO) -> tuple[dict[str, np.ndarray], dict]:
    if fh.readline() != CHECKPOINT_MAGIC:
        raise ValueError("not a tensor container")
    header = json.loads(fh.readline().decode("utf-8"))
    payload = fh.read()
    out = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype=e["dtype"], count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return out, header["extra"]


def save_store(fh: BinaryIO, store: ParamStore, extra: dict | None = None) -> None:
    save_tensors(fh, store.state(), extra, {k: m["seed"] for k, m in store.meta.items()})
