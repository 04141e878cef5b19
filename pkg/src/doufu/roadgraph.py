"""Segment-dual road graph and variational graph autoencoder pre-training."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import RoadNetwork, Route
from .features import segment_vector
from .nn import ParamStore, Tensor, adam_step, backward
from .nn import ops as T


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class RoadGraph:
    vertices: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    X: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)), compare=False)

    @property
    def index(self) -> dict[str, int]:
        return {v: i for i, v in enumerate(self.vertices)}

    def edge_index(self) -> np.ndarray:
        idx = self.index
        return np.array([(idx[a], idx[b]) for a, b in self.edges], dtype=np.int64).reshape(-1, 2)

    def __eq__(self, other):
        return (isinstance(other, RoadGraph) and self.vertices == other.vertices
                and self.edges == other.edges and np.array_equal(self.X, other.X))

    def __hash__(self):
        return hash((self.vertices, self.edges))


def build_graph(routes: Iterable[Route], network: RoadNetwork | None = None,
                feature_fn=None, standardize: bool = True) -> RoadGraph:
    """Vertices are segments seen in any route; edge (i, j) when j directly follows i.

    Vertices and edges are sorted, so the result does not depend on route order.
    Features come from ``feature_fn(seg_id)`` or, given a network, the segment vector;
    columns are z-scored over the vertices unless ``standardize`` is off.
    """
    verts, edges = set(), set()
    routes = list(routes)
    if not routes:
        raise GraphError("need at least one route")
    for r in routes:
        verts.update(r.segments)
        for a, b in zip(r.segments, r.segments[1:]):
            if a != b:
                edges.add((a, b))
    vertices = tuple(sorted(verts))
    if feature_fn is None and network is not None:
        feature_fn = lambda s: segment_vector(network, s)
    if feature_fn is None:
        return RoadGraph(vertices, tuple(sorted(edges)), np.eye(len(vertices)))
    X = np.stack([np.asarray(feature_fn(v), dtype=float) for v in vertices])
    if standardize:
        sd = X.std(axis=0)
        X = (X - X.mean(axis=0)) / np.where(sd < 1e-12, 1.0, sd)
    return RoadGraph(vertices, tuple(sorted(edges)), X)


def normalized_adjacency(graph: RoadGraph) -> np.ndarray:
    """D^-1/2 (A + A^T > 0, plus self-loops) D^-1/2 as a dense matrix."""
    n = len(graph.vertices)
    A = np.zeros((n, n))
    ei = graph.edge_index()
    if len(ei):
        A[ei[:, 0], ei[:, 1]] = 1.0
        A[ei[:, 1], ei[:, 0]] = 1.0
    A += np.eye(n)
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return A * d[:, None] * d[None, :]


class VgaeParams:
    """Shared first GCN layer; separate second-layer heads for mean and log-variance."""

    def __init__(self, d_in: int, d_z: int = 32, hidden: int = 64, seed: int = 0,
                 store: ParamStore | None = None):
        self.store = store if store is not None else ParamStore(seed)
        self.d_in, self.d_z, self.hidden = d_in, d_z, hidden
        self.W0 = self.store.add("vgae.W0", (d_in, hidden), fan_in=d_in)
        self.W_mu = self.store.add("vgae.W_mu", (hidden, d_z), fan_in=hidden)
        self.W_logvar = self.store.add("vgae.W_logvar", (hidden, d_z), fan_in=hidden)


def gcn_encode(graph: RoadGraph, params: VgaeParams, A_hat: np.ndarray | None = None):
    """Two graph convolutions; returns (mu, logvar) tensors of shape [|V|, d_z]."""
    X = graph.X
    if X.shape[1] != params.d_in:
        raise GraphError(f"feature width {X.shape[1]} != encoder input {params.d_in}")
    if A_hat is None:
        A_hat = normalized_adjacency(graph)
    h = T.relu(T.matmul(A_hat, T.matmul(Tensor(X), params.W0)))
    ah = T.matmul(A_hat, h)
    return T.matmul(ah, params.W_mu), T.matmul(ah, params.W_logvar)


def decode_edge(z_i, z_j) -> float:
    z_i, z_j = np.asarray(z_i, dtype=float), np.asarray(z_j, dtype=float)
    if z_i.shape != z_j.shape:
        raise GraphError("latent vectors differ in dimension")
    s = float(z_i @ z_j)
    return 1.0 / (1.0 + math.exp(-s)) if s >= 0 else math.exp(s) / (1.0 + math.exp(s))


def sample_negatives(graph: RoadGraph, count: int, rng: np.random.Generator,
                     exclude: set | None = None) -> np.ndarray:
    """Uniform ordered pairs (i != j) that are not edges."""
    n = len(graph.vertices)
    taken = {tuple(e) for e in graph.edge_index()} | (exclude or set())
    if n * (n - 1) - len(taken) < count:
        raise GraphError("not enough non-edges to sample from")
    out = []
    while len(out) < count:
        i, j = rng.integers(n, size=2)
        if i != j and (int(i), int(j)) not in taken:
            out.append((int(i), int(j)))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def vgae_loss(graph: RoadGraph, mu, logvar, sample_seed, negatives: np.ndarray | None = None):
    """Edge BCE over positives plus as many sampled non-edges, plus a KL(q || N(0, I)) term.

    The KL term is the per-vertex mean KL scaled by 1 / |V|, which keeps it on the
    same footing as the reconstruction term as the graph grows.

    The latent sample is z = mu + eps * exp(logvar / 2) with eps drawn from ``sample_seed``.
    """
    pos = graph.edge_index()
    if len(pos) == 0:
        raise GraphError("graph has no edges to reconstruct")
    mu, logvar = T.as_tensor(mu), T.as_tensor(logvar)
    rng = np.random.default_rng(sample_seed)
    eps = rng.standard_normal(mu.shape)
    if negatives is None:
        negatives = sample_negatives(graph, len(pos), rng)
    z = mu + Tensor(eps) * T.exp(logvar * 0.5)
    pairs = np.concatenate([pos, negatives])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(negatives))])
    logits = T.tsum(z[pairs[:, 0]] * z[pairs[:, 1]], axis=1)
    bce = T.bce_with_logits(logits, y)
    n = mu.shape[0]
    kl = T.tsum(T.exp(logvar) + mu * mu - 1.0 - logvar) * (0.5 / (n * n))
    return bce + kl


@dataclass
class PretrainResult:
    table: dict[str, np.ndarray]
    history: list[float]
    params: VgaeParams


def pretrain(graph: RoadGraph, d_z: int = 32, hidden: int = 64, lr: float = 0.01,
             epochs: int = 200, seed: int = 0) -> PretrainResult:
    """Adam on the VGAE loss; exported embeddings are the mean vectors."""
    if d_z < 1 or hidden < 1 or epochs < 0 or not lr > 0:
        raise GraphError("invalid pre-training hyperparameters")
    params = VgaeParams(graph.X.shape[1], d_z, hidden, seed)
    A_hat = normalized_adjacency(graph)
    history = []
    for epoch in range(epochs):
        params.store.zero_grad()
        mu, logvar = gcn_encode(graph, params, A_hat)
        loss = vgae_loss(graph, mu, logvar, sample_seed=[seed, epoch])
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"VGAE loss became non-finite at epoch {epoch}")
        history.append(loss.item())
        backward(loss)
        adam_step(params.store, lr)
    mu, _ = gcn_encode(graph, params, A_hat)
    table = {v: mu.data[i].copy() for i, v in enumerate(graph.vertices)}
    return PretrainResult(table, history, params)


def stochastic_block_graph(seed: int, n: int = 200, blocks: int = 4, p_in: float = 0.08,
                           p_out: float = 0.002, feature_dim: int = 16) -> RoadGraph:
    """Directed planted-partition graph with uninformative Gaussian vertex features.

    Vertex i belongs to block i % blocks; each ordered pair is an edge with
    probability p_in inside a block and p_out across blocks.
    """
    if n < 2 or blocks < 1 or not (0 <= p_out <= 1 and 0 <= p_in <= 1):
        raise GraphError("invalid block-graph parameters")
    rng = np.random.default_rng(seed)
    b = np.arange(n) % blocks
    P = np.where(b[:, None] == b[None, :], p_in, p_out)
    A = (rng.random((n, n)) < P) & ~np.eye(n, dtype=bool)
    verts = tuple(f"v{i:03d}" for i in range(n))
    edges = tuple(sorted((verts[i], verts[j]) for i, j in zip(*np.nonzero(A))))
    return RoadGraph(verts, edges, rng.normal(size=(n, feature_dim)))


def auc(pos_scores: Sequence[float], neg_scores: Sequence[float]) -> float:
    """Probability a positive outscores a negative, ties counting one half."""
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need positive and negative scores")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2.0) / (len(pos) * len(neg)))


def split_edges(graph: RoadGraph, test_frac: float, seed: int):
    """Hold out a fraction of edges; returns (train graph, test positives, test negatives)."""
    rng = np.random.default_rng(seed)
    ei = graph.edge_index()
    perm = rng.permutation(len(ei))
    n_test = max(1, int(round(test_frac * len(ei))))
    test_idx = set(perm[:n_test].tolist())
    keep = [e for k, e in enumerate(graph.edges) if k not in test_idx]
    train = RoadGraph(graph.vertices, tuple(keep), graph.X)
    test_pos = ei[sorted(test_idx)]
    test_neg = sample_negatives(graph, n_test, rng)
    return train, test_pos, test_neg


def link_auc(table_or_z, graph: RoadGraph, pos: np.ndarray, neg: np.ndarray) -> float:
    if isinstance(table_or_z, dict):
        z = np.stack([table_or_z[v] for v in graph.vertices])
    else:
        z = np.asarray(table_or_z)
    score = lambda pairs: np.einsum("ij,ij->i", z[pairs[:, 0]], z[pairs[:, 1]])
    return auc(score(pos), score(neg))


def write_graph(graph: RoadGraph, sink) -> None:
    sink.write("src_id,dst_id\n")
    for a, b in graph.edges:
        sink.write(f"{a},{b}\n")


def write_embedding_table(table: dict[str, np.ndarray], sink) -> None:
    for sid in sorted(table):
        sink.write(sid + "," + ",".join(repr(float(v)) for v in table[sid]) + "\n")


def read_embedding_table(source) -> dict[str, np.ndarray]:
    out = {}
    for line in source:
        parts = line.strip().split(",")
        if len(parts) < 2:
            continue
        out[parts[0]] = np.array([float(v) for v in parts[1:]])
    return out
