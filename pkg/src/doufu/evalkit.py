"""Downstream evaluation: k-fold user classification, k-means, clustering metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.linear_model import LogisticRegression, RidgeClassifier
from sklearn.naive_bayes import GaussianNB
from sklearn.neighbors import KNeighborsClassifier
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

LEARNERS = ("logistic", "ridge", "naive_bayes", "knn", "mlp")


class EvalError(ValueError):
    pass


@dataclass
class LabeledEmbeddings:
    X: np.ndarray
    labels: np.ndarray
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.labels = np.asarray(self.labels)
        if self.X.ndim != 2 or len(self.X) != len(self.labels):
            raise EvalError("embedding rows and labels differ in count")
        if self.ids and len(self.ids) != len(self.labels):
            raise EvalError("id count differs from label count")
        if not np.all(np.isfinite(self.X)):
            raise EvalError("embeddings contain non-finite values")


@dataclass
class Partition:
    assign: np.ndarray
    k: int
    centers: np.ndarray | None = None
    inertia: float = float("nan")


# ------------------------------------------------------------------ classification metrics

def _pair(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if len(pred) != len(truth):
        raise EvalError("prediction and truth differ in length")
    if len(pred) == 0:
        raise EvalError("empty input")
    return pred, truth


def accuracy(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(pred == truth))


def macro_f1(pred, truth) -> float:
    """Mean over classes (union of predicted and true labels) of per-class F1; 0/0 counts 0."""
    pred, truth = _pair(pred, truth)
    scores = []
    for c in np.unique(np.concatenate([pred, truth])):
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * p * r / (p + r) if p + r else 0.0)
    return float(np.mean(scores))


# ------------------------------------------------------------------ learners and folds

def make_learner(name: str, seed: int = 0):
    """Fixed hyperparameters; every learner standardizes on its own training fold."""
    if name == "logistic":
        est = LogisticRegression(max_iter=200)
    elif name == "ridge":
        est = RidgeClassifier(alpha=1.0)
    elif name == "naive_bayes":
        est = GaussianNB()
    elif name == "knn":
        return KNeighborsClassifier(n_neighbors=5)
    elif name == "mlp":
        est = MLPClassifier(hidden_layer_sizes=(64,), max_iter=500, random_state=seed)
    else:
        raise EvalError(f"unknown learner {name!r}")
    return make_pipeline(StandardScaler(), est)


def stratified_folds(labels, k_folds: int, seed: int) -> list[np.ndarray]:
    """Test-index arrays; each class is shuffled and dealt round-robin across folds."""
    labels = np.asarray(labels)
    if k_folds < 2:
        raise EvalError("need at least two folds")
    rng = np.random.default_rng(seed)
    folds = [[] for _ in range(k_folds)]
    classes, counts = np.unique(labels, return_counts=True)
    small = classes[counts < k_folds]
    if len(small):
        raise EvalError(f"class {small[0]!r} has {counts[counts < k_folds][0]} members, "
                        f"fewer than {k_folds} folds")
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(labels == c))
        for j, i in enumerate(idx):
            folds[(j + offset) % k_folds].append(int(i))
        offset += len(idx)
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def kfold_predictions(data: LabeledEmbeddings, learner: str, k_folds: int = 10, seed: int = 0):
    """Out-of-fold predictions plus the per-fold test indices."""
    folds = stratified_folds(data.labels, k_folds, seed)
    pred = np.empty(len(data.labels), dtype=data.labels.dtype)
    for test in folds:
        train = np.setdiff1d(np.arange(len(data.labels)), test)
        model = make_learner(learner, seed)
        model.fit(data.X[train], data.labels[train])
        pred[test] = model.predict(data.X[test])
    return pred, folds


def kfold_classify(data: LabeledEmbeddings, learner: str, k_folds: int = 10,
                   seed: int = 0) -> tuple[float, float]:
    """Mean test ACC and macro-F1 over stratified folds."""
    pred, folds = kfold_predictions(data, learner, k_folds, seed)
    accs = [accuracy(pred[f], data.labels[f]) for f in folds]
    f1s = [macro_f1(pred[f], data.labels[f]) for f in folds]
    return float(np.mean(accs)), float(np.mean(f1s))


# ------------------------------------------------------------------ clustering

def _sqdist(X, C):
    return np.maximum((X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :], 0.0)


def kmeans(X, k: int, seed: int = 0, max_iter: int = 300) -> Partition:
    """k-means++ seeding followed by Lloyd iterations until assignments stop changing."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k < 1 or k > n:
        raise EvalError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centers = [X[rng.integers(n)]]
    d2 = _sqdist(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every point coincides with a center; take any unused row
            used = {tuple(c) for c in centers}
            rest = [i for i in range(n) if tuple(X[i]) not in used]
            i = rest[0] if rest else int(rng.integers(n))
        else:
            i = int(rng.choice(n, p=d2 / total))
        centers.append(X[i])
        d2 = np.minimum(d2, _sqdist(X, X[i:i + 1])[:, 0])
    C = np.array(centers)
    assign = None
    for _ in range(max_iter):
        new = np.argmin(_sqdist(X, C), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = X[assign == j]
            if len(members):
                C[j] = members.mean(0)
            else:
                # re-seed an emptied cluster at the point farthest from its center
                far = int(np.argmax(_sqdist(X, C)[np.arange(n), assign]))
                C[j] = X[far]
                assign[far] = j
    inertia = float(_sqdist(X, C)[np.arange(n), assign].sum())
    return Partition(assign, k, C, inertia)


def davies_bouldin(X, partition) -> float:
    """Mean over clusters of the worst (s_i + s_j) / d(c_i, c_j); s = mean distance to center."""
    X = np.asarray(X, dtype=float)
    labels = np.asarray(partition.assign if isinstance(partition, Partition) else partition)
    ids = np.unique(labels)
    if len(ids) < 2:
        raise EvalError("Davies-Bouldin needs at least two clusters")
    C = np.array([X[labels == c].mean(0) for c in ids])
    s = np.array([np.linalg.norm(X[labels == c] - C[i], axis=1).mean() for i, c in enumerate(ids)])
    worst = np.zeros(len(ids))
    for i in range(len(ids)):
        for j in range(len(ids)):
            if i == j:
                continue
            d = np.linalg.norm(C[i] - C[j])
            if d == 0:
                raise EvalError(f"clusters {ids[i]!r} and {ids[j]!r} have coincident centers")
            worst[i] = max(worst[i], (s[i] + s[j]) / d)
    return float(worst.mean())


def _labels(p):
    return np.asarray(p.assign if isinstance(p, Partition) else p)


def contingency(a, b) -> np.ndarray:
    a, b = _labels(a), _labels(b)
    if len(a) != len(b):
        raise EvalError("partitions differ in length")
    if len(a) == 0:
        raise EvalError("empty input")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    M = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(M, (ai, bi), 1)
    return M


def nmi(a, b) -> float:
    """I(a; b) / ((H(a) + H(b)) / 2), natural log; 0 when both entropies vanish."""
    M = contingency(a, b).astype(float)
    n = M.sum()
    pa, pb = M.sum(1) / n, M.sum(0) / n
    ha = -np.sum(pa * np.log(pa))
    hb = -np.sum(pb * np.log(pb))
    nz = M > 0
    pij = M[nz] / n
    mi = float(np.sum(pij * np.log(pij / np.outer(pa, pb)[nz])))
    denom = (ha + hb) / 2
    if denom <= 0:
        return 0.0
    return float(min(max(mi / denom, 0.0), 1.0))


def ari(a, b) -> float:
    """Adjusted Rand index from pair counts; 1 when the expected and maximal index coincide."""
    M = contingency(a, b)
    n = int(M.sum())
    if n < 2:
        raise EvalError("ARI needs at least two items")
    comb = lambda x: x * (x - 1) / 2.0
    s_ij = comb(M).sum()
    s_a = comb(M.sum(1)).sum()
    s_b = comb(M.sum(0)).sum()
    expected = s_a * s_b / comb(n)
    max_index = (s_a + s_b) / 2
    if max_index == expected:
        return 1.0
    return float((s_ij - expected) / (max_index - expected))


# ------------------------------------------------------------------ reports

@dataclass
class MetricsReport:
    variant: str
    seed: int
    k_folds: int
    k: int
    classification: dict[str, tuple[float, float]] = field(default_factory=dict)
    clustering: dict[str, float] = field(default_factory=dict)

    def records(self) -> list[tuple[str, str, float, int]]:
        out = []
        for name, (acc, f1) in self.classification.items():
            out.append((self.variant, f"{name}.acc", acc, self.seed))
            out.append((self.variant, f"{name}.macro_f1", f1, self.seed))
        for name, v in self.clustering.items():
            out.append((self.variant, name, v, self.seed))
        return out


def evaluate(data: LabeledEmbeddings, variant: str, learners: Sequence[str] = LEARNERS,
             k_folds: int = 10, seed: int = 0, k: int | None = None) -> MetricsReport:
    k = len(np.unique(data.labels)) if k is None else k
    rep = MetricsReport(variant, seed, k_folds, k)
    for name in learners:
        rep.classification[name] = kfold_classify(data, name, k_folds, seed)
    part = kmeans(data.X, k, seed)
    rep.clustering["db"] = davies_bouldin(data.X, part)
    rep.clustering["nmi"] = nmi(part, data.labels)
    rep.clustering["ari"] = ari(part, data.labels)
    return rep


def format_records(records) -> str:
    lines = ["model_variant,learner_or_metric,value,seed"]
    lines += [f"{v},{m},{val!r},{s}" for v, m, val, s in records]
    return "\n".join(lines) + "\n"


def parse_records(text: str) -> list[tuple[str, str, float, int]]:
    out = []
    for line in text.splitlines()[1:]:
        if line.strip():
            v, m, val, s = line.split(",")
            out.append((v, m, float(val), int(s)))
    return out


def format_table(reports: Sequence[MetricsReport]) -> str:
    """Human-readable table: one row per (variant, seed)."""
    if not reports:
        return ""
    learners = list(reports[0].classification)
    head = ["variant", "seed"] + [f"{l} acc/f1" for l in learners] + ["DB", "NMI", "ARI"]
    rows = [head]
    for r in reports:
        row = [r.variant, str(r.seed)]
        row += [f"{r.classification[l][0]:.4f}/{r.classification[l][1]:.4f}" for l in learners]
        row += [f"{r.clustering.get(m, float('nan')):.4f}" for m in ("db", "nmi", "ari")]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def ranking(reports: Sequence[MetricsReport], metric: str = "acc") -> dict[str, list[tuple[str, float]]]:
    """Per learner, variants sorted by mean metric over seeds (descending)."""
    if len({r.variant for r in reports}) < 2:
        raise EvalError("ranking needs at least two variants")
    pos = 0 if metric == "acc" else 1
    out = {}
    learners = list(reports[0].classification)
    for l in learners:
        means = {}
        for v in dict.fromkeys(r.variant for r in reports):
            means[v] = float(np.mean([r.classification[l][pos] for r in reports if r.variant == v]))
        out[l] = sorted(means.items(), key=lambda kv: (-kv[1], kv[0]))
    return out
