"""Evaluation metrics and the federated objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


@dataclass
class RoundRecord:
    round: int
    f_after_e: float
    f_after_m: float
    f_after_l: float
    r_value: float
    micro_acc: float | None
    macro_f1: float | None
    b_per_cluster: list
    eta_bounds: list
    assignment_snapshot: list
    ari_vs_truth: float | None
    # extras beyond the core schema
    r_after_m: float | None = None
    u_estimate: float | None = None
    mean_sq_grad: float | None = None
    steps: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _labels(a) -> np.ndarray:
    return np.asarray(a, dtype=np.int64).ravel()


def micro_accuracy(pred, truth) -> float:
    p, t = _labels(pred), _labels(truth)
    if p.size != t.size:
        raise ValueError("pred and truth lengths differ")
    if p.size == 0:
        raise ValueError("no predictions")
    return 100.0 * float((p == t).sum()) / p.size


def macro_f1(pred, truth, n_classes: int) -> float:
    """Unweighted mean of per-class F1 over all classes; classes never seen nor predicted score 0."""
    p, t = _labels(pred), _labels(truth)
    if p.size != t.size:
        raise ValueError("pred and truth lengths differ")
    if p.size and (max(p.max(), t.max()) >= n_classes or min(p.min(), t.min()) < 0):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    total = 0.0
    for c in range(n_classes):
        tp = int(((p == c) & (t == c)).sum())
        fp = int(((p == c) & (t != c)).sum())
        fn = int(((p != c) & (t == c)).sum())
        if tp:
            total += 2 * tp / (2 * tp + fp + fn)
    return total / n_classes


def clusterability_b(client_grads, weights) -> float | None:
    """Largest relative deviation of a member gradient from the weighted-mean gradient.

    Returns ``None`` when the mean gradient vanishes and the ratio is undefined.
    """
    G = np.atleast_2d(np.asarray(client_grads, dtype=np.float64))
    lam = np.asarray(weights, dtype=np.float64)
    if G.shape[0] == 0 or lam.shape != (G.shape[0],):
        raise ValueError("need one weight per member gradient")
    if not (lam > 0).all():
        raise ValueError("weights must be strictly positive")
    mean = ((lam / lam.sum())[:, None] * G).sum(axis=0)
    denom = np.linalg.norm(mean)
    if denom == 0:
        return None
    return float(np.linalg.norm(G - mean, axis=1).max() / denom)


def cosine_similarity_matrix(vectors) -> np.ndarray:
    V = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    norms = np.linalg.norm(V, axis=1)
    if (norms == 0).any():
        raise ValueError("cosine similarity is undefined for a zero vector")
    U = V / norms[:, None]
    S = U @ U.T
    S = 0.5 * (S + S.T)
    np.fill_diagonal(S, 1.0)
    return S


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def adjusted_rand_index(a, b) -> float:
    x, y = _labels(a), _labels(b)
    if x.size != y.size:
        raise ValueError("assignments differ in length")
    n = x.size
    _, xi = np.unique(x, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    table = np.zeros((xi.max() + 1 if n else 0, yi.max() + 1 if n else 0))
    np.add.at(table, (xi, yi), 1)
    index = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(n)
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial (all singletons or one block): identical up to relabeling
        return 1.0
    return float((index - expected) / (max_index - expected))


def weighted_objective(losses: Sequence[float], weights) -> float:
    lam = np.asarray(weights, dtype=np.float64)
    return float(np.dot(lam / lam.sum(), np.asarray(losses, dtype=np.float64)))


def objective_r(state, spec, models: str = "cluster") -> float:
    """Weight-normalised sum of client losses on their own training shards.

    ``models="cluster"`` evaluates each client's cluster model, ``"client"``
    its own current parameters.
    """
    from .model import loss

    losses = []
    for c in state.clients:
        params = state.clusters[c.cluster].model if models == "cluster" else c.params
        losses.append(loss(params, spec, c.train))
    return weighted_objective(losses, [c.weight for c in state.clients])


def windowed_mean(values: Sequence[float | None], window: int) -> tuple[float | None, float | None]:
    """Mean and population std over the last ``window`` non-missing values."""
    tail = [v for v in list(values)[-window:] if v is not None and not math.isnan(v)]
    if not tail:
        return None, None
    arr = np.asarray(tail)
    return float(arr.mean()), float(arr.std())
