"""Weighted K-means over client parameter vectors.

``reps`` is an (m, p) array of client representations, ``centroids`` a
(K, p) array and an assignment an int array of length m.
"""

from __future__ import annotations

import numpy as np


def _as_reps(reps) -> np.ndarray:
    R = np.asarray(reps, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] == 0:
        raise ValueError("reps must be a non-empty (m, p) array")
    return R


def _as_weights(weights, m: int) -> np.ndarray:
    lam = np.asarray(weights, dtype=np.float64)
    if lam.shape != (m,):
        raise ValueError(f"expected {m} weights, got shape {lam.shape}")
    if not (lam > 0).all():
        raise ValueError("weights must be strictly positive")
    return lam


def normalized(weights) -> np.ndarray:
    """Weights divided by their sum; equal weights of any scale give bitwise-equal results."""
    lam = np.asarray(weights, dtype=np.float64)
    return lam / lam.sum()


def weighted_mean(rows: np.ndarray, weights) -> np.ndarray:
    """Weighted mean written as an offset from the first row.

    A single row, or identical rows, come back bit-for-bit unchanged.
    """
    p = normalized(weights)
    base = rows[0]
    return base + (p[:, None] * (rows - base)).sum(axis=0)


def squared_distances(reps, centroids) -> np.ndarray:
    """(m, K) matrix of squared Euclidean distances, computed by explicit differences."""
    R, W = _as_reps(reps), np.asarray(centroids, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != R.shape[1]:
        raise ValueError(f"centroids shape {W.shape} does not match reps width {R.shape[1]}")
    D = np.empty((R.shape[0], W.shape[0]))
    for j in range(W.shape[0]):
        diff = R - W[j]
        D[:, j] = np.einsum("ij,ij->i", diff, diff)
    return D


def e_step(reps, centroids, weights) -> np.ndarray:
    """Assign each client to its nearest centroid; ties go to the lowest index.

    The client weight multiplies every distance of its row equally, so it
    never changes the argmin; it is still validated.
    """
    R = _as_reps(reps)
    _as_weights(weights, R.shape[0])
    D = squared_distances(R, centroids)
    if D.shape[1] == 0:
        raise ValueError("need at least one centroid")
    return D.argmin(axis=1)  # argmin returns the first minimum


def m_step(reps, assignment, weights, k: int, previous=None) -> np.ndarray:
    """Weighted mean of each cluster's members; empty clusters keep ``previous``."""
    R = _as_reps(reps)
    lam = _as_weights(weights, R.shape[0])
    a = np.asarray(assignment, dtype=np.int64)
    if a.shape != (R.shape[0],) or (a < 0).any() or (a >= k).any():
        raise ValueError("assignment must hold one cluster index in [0, k) per client")
    out = np.zeros((k, R.shape[1])) if previous is None else np.array(previous, dtype=np.float64)
    if out.shape != (k, R.shape[1]):
        raise ValueError("previous centroids have the wrong shape")
    for j in range(k):
        members = np.flatnonzero(a == j)
        if members.size == 0:
            continue
        # fixed client-index order keeps the reduction reproducible
        out[j] = weighted_mean(R[members], lam[members])
    return out


def objective_f(reps, assignment, centroids, weights) -> float:
    R = _as_reps(reps)
    lam = _as_weights(weights, R.shape[0])
    W = np.asarray(centroids, dtype=np.float64)
    a = np.asarray(assignment, dtype=np.int64)
    diff = R - W[a]
    return float((normalized(lam) * np.einsum("ij,ij->i", diff, diff)).sum())


def init_centroid_indices(reps, k: int, strategy: str = "kmeanspp", seed=None) -> np.ndarray:
    """Indices of the clients whose representations seed the K centroids."""
    R = _as_reps(reps)
    m = R.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    if strategy == "random_clients":
        if k > m:
            raise ValueError(f"cannot pick {k} distinct clients out of {m}")
        return rng.choice(m, size=k, replace=False)
    if strategy != "kmeanspp":
        raise ValueError(f"unknown init strategy {strategy!r}")
    # greedy k-means++: draw a few D^2-proportional candidates, keep the one
    # that lowers the potential most
    n_trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(m))]
    closest = ((R - R[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            candidates = rng.choice(m, size=n_trials, p=closest / total)
        else:
            candidates = rng.integers(m, size=1)
        best, best_pot, best_closest = -1, np.inf, closest
        for c in candidates:
            trial = np.minimum(closest, ((R - R[c]) ** 2).sum(axis=1))
            pot = trial.sum()
            if pot < best_pot:
                best, best_pot, best_closest = int(c), pot, trial
        chosen.append(best)
        closest = best_closest
    return np.array(chosen)


def init_centroids(reps, k: int, strategy: str = "kmeanspp", seed=None) -> np.ndarray:
    """Pick K client representations as starting centroids (uniformly, or by k-means++ seeding)."""
    R = _as_reps(reps)
    return R[init_centroid_indices(R, k, strategy, seed)].copy()
