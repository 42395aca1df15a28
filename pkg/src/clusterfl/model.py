"""Small softmax classifiers with hand-derived gradients and the local SGD routine.

Parameters are flat float64 arrays; a :class:`Layout` maps named segments of
the flat vector to weight and bias tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset


@dataclass(frozen=True)
class Layout:
    segments: tuple  # ((name, shape), ...)

    @property
    def size(self) -> int:
        return int(sum(np.prod(shape) for _, shape in self.segments))

    @property
    def names(self) -> tuple:
        return tuple(name for name, _ in self.segments)

    def slices(self) -> dict:
        out, start = {}, 0
        for name, shape in self.segments:
            n = int(np.prod(shape))
            out[name] = (slice(start, start + n), shape)
            start += n
        return out

    def unpack(self, params: np.ndarray) -> dict:
        if params.shape != (self.size,):
            raise ValueError(f"parameter vector has shape {params.shape}, layout needs ({self.size},)")
        return {name: params[sl].reshape(shape) for name, (sl, shape) in self.slices().items()}

    def mask(self, names: Sequence[str] | None = None) -> np.ndarray:
        """Boolean mask selecting the given segments (all of them when ``names`` is None)."""
        if names is None:
            return np.ones(self.size, dtype=bool)
        unknown = set(names) - set(self.names)
        if unknown:
            raise ValueError(f"unknown layout segments {sorted(unknown)}")
        m = np.zeros(self.size, dtype=bool)
        for name, (sl, _) in self.slices().items():
            if name in names:
                m[sl] = True
        return m

    def to_dict(self) -> dict:
        return {"segments": [[name, list(shape)] for name, shape in self.segments]}


def params_to_json(params: np.ndarray, layout: Layout) -> str:
    return json.dumps({"layout": layout.to_dict(), "values": np.asarray(params).tolist()})


def params_from_json(text: str) -> tuple[np.ndarray, Layout]:
    doc = json.loads(text)
    layout = Layout(tuple((name, tuple(shape)) for name, shape in doc["layout"]["segments"]))
    values = np.asarray(doc["values"], dtype=np.float64)
    if values.shape != (layout.size,):
        raise ValueError("value count does not match layout")
    return values, layout


@dataclass(frozen=True)
class ModelSpec:
    kind: str = "logistic"
    n_features: int = 10
    n_classes: int = 4
    hidden_units: int = 0
    init: str = "zeros"
    init_std: float = 0.01

    def __post_init__(self):
        if self.kind not in ("logistic", "mlp1"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "mlp1" and self.hidden_units < 1:
            raise ValueError("mlp1 needs hidden_units >= 1")
        if self.init not in ("zeros", "gaussian"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.n_features < 1 or self.n_classes < 1:
            raise ValueError("n_features and n_classes must be >= 1")

    @property
    def layout(self) -> Layout:
        d, C, h = self.n_features, self.n_classes, self.hidden_units
        if self.kind == "logistic":
            return Layout((("W", (C, d)), ("b", (C,))))
        return Layout((("W1", (h, d)), ("b1", (h,)), ("W2", (C, h)), ("b2", (C,))))


def init_params(spec: ModelSpec, seed: int | None = None) -> np.ndarray:
    n = spec.layout.size
    if spec.init == "zeros":
        return np.zeros(n)
    return spec.init_std * np.random.default_rng(seed).normal(size=n)


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.001
    momentum: float = 0.9
    batch_size: int = 32
    local_steps: int = 10
    prox_mu: float = 0.0
    full_batch: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0 (0 freezes training)")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.local_steps < 1:
            raise ValueError("batch_size and local_steps must be >= 1")
        if self.prox_mu < 0:
            raise ValueError("prox_mu must be >= 0")


def _logits(params, spec, X):
    p = spec.layout.unpack(params)
    if spec.kind == "logistic":
        return X @ p["W"].T + p["b"], None
    hidden = np.tanh(X @ p["W1"].T + p["b1"])
    return hidden @ p["W2"].T + p["b2"], hidden


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    E = np.exp(Z)
    return E / E.sum(axis=1, keepdims=True)


def _check_width(spec, X):
    if X.ndim != 2 or X.shape[1] != spec.n_features:
        raise ValueError(f"features have shape {X.shape}, model expects width {spec.n_features}")


def forward(params: np.ndarray, spec: ModelSpec, features: np.ndarray) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    _check_width(spec, X)
    Z, _ = _logits(params, spec, X)
    return _softmax(Z)


def predict(params, spec, features) -> np.ndarray:
    return forward(params, spec, features).argmax(axis=1)


def loss(params: np.ndarray, spec: ModelSpec, shard: Dataset) -> float:
    """Mean cross-entropy over ``shard``."""
    if len(shard) == 0:
        raise ValueError("empty shard")
    _check_width(spec, shard.features)
    Z, _ = _logits(params, spec, shard.features)
    zmax = Z.max(axis=1)
    lse = zmax + np.log(np.exp(Z - zmax[:, None]).sum(axis=1))
    return float(np.mean(lse - Z[np.arange(len(shard)), shard.labels]))


def _grad_arrays(params, spec, X, y):
    n = X.shape[0]
    Z, hidden = _logits(params, spec, X)
    G = _softmax(Z)
    G[np.arange(n), y] -= 1.0
    G /= n
    p = spec.layout.unpack(params)
    if spec.kind == "logistic":
        parts = [G.T @ X, G.sum(axis=0)]
    else:
        dH = (G @ p["W2"]) * (1.0 - hidden ** 2)
        parts = [dH.T @ X, dH.sum(axis=0), G.T @ hidden, G.sum(axis=0)]
    return np.concatenate([a.ravel() for a in parts])


def gradient(params: np.ndarray, spec: ModelSpec, batch: Dataset,
             prox_anchor: np.ndarray | None = None, prox_mu: float = 0.0) -> np.ndarray:
    """Gradient of ``loss`` plus ``prox_mu/2 * ||params - prox_anchor||^2``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    _check_width(spec, batch.features)
    if params.shape != (spec.layout.size,):
        raise ValueError(f"parameter vector has shape {params.shape}, expected ({spec.layout.size},)")
    g = _grad_arrays(params, spec, batch.features, batch.labels)
    if prox_mu > 0:
        if prox_anchor is None or prox_anchor.shape != params.shape:
            raise ValueError("prox_anchor must match params when prox_mu > 0")
        g = g + prox_mu * (params - prox_anchor)
    return g


def smoothness_bound(spec: ModelSpec, shard: Dataset) -> float:
    """Upper bound on the Lipschitz constant of the loss gradient (logistic only).

    The softmax cross-entropy Hessian is ``(diag(p) - p p^T) kron x x^T`` per
    sample and the first factor has spectral norm at most 1/2.
    """
    if spec.kind != "logistic":
        raise ValueError("a global smoothness bound is only available for the convex logistic model")
    Xb = np.hstack([shard.features, np.ones((len(shard), 1))])
    top = np.linalg.eigvalsh(Xb.T @ Xb / len(shard))[-1]
    return 0.5 * float(top)


@dataclass
class UpdateTrace:
    grad_norms: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    batch_indices: list = field(default_factory=list)
    displacement: float = 0.0


StepSize = Callable[[int, np.ndarray], float]


def run_sgd(params: np.ndarray, grad_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
            n_samples: int, cfg: SgdConfig, rng_seed,
            step_size: StepSize | None = None) -> tuple[np.ndarray, UpdateTrace]:
    """Q steps of momentum SGD on an arbitrary objective.

    ``grad_fn(w, batch_idx)`` returns the minibatch gradient. Batches are drawn
    without replacement within an epoch and reshuffled per epoch; full-batch
    mode (or a batch at least as large as the data) uses every index each step.
    ``step_size(q, g)`` overrides the learning rate per step.
    """
    if n_samples < 1:
        raise ValueError("empty shard")
    rng = np.random.default_rng(rng_seed)
    w = np.array(params, dtype=np.float64, copy=True)
    v = np.zeros_like(w)
    trace = UpdateTrace()
    everything = np.arange(n_samples)
    full = cfg.full_batch or cfg.batch_size >= n_samples
    order, cursor = None, n_samples
    for q in range(cfg.local_steps):
        if full:
            idx = everything
        else:
            if cursor >= n_samples:
                order, cursor = rng.permutation(n_samples), 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
        g = grad_fn(w, idx)
        eta = cfg.learning_rate if step_size is None else float(step_size(q, g))
        trace.grad_norms.append(float(np.linalg.norm(g)))
        trace.step_sizes.append(eta)
        trace.batch_indices.append(idx)
        if cfg.momentum > 0:
            v = cfg.momentum * v + g
            w -= eta * v
        else:
            w -= eta * g
    trace.displacement = float(np.linalg.norm(w - params))
    return w, trace


def local_update(params: np.ndarray, spec: ModelSpec, shard: Dataset, cfg: SgdConfig, rng_seed,
                 prox_anchor: np.ndarray | None = None,
                 step_size: StepSize | None = None) -> tuple[np.ndarray, UpdateTrace]:
    if len(shard) == 0:
        raise ValueError("empty shard")
    anchor = params if prox_anchor is None else prox_anchor
    X, y = shard.features, shard.labels

    def grad_fn(w, idx):
        g = _grad_arrays(w, spec, X[idx], y[idx])
        if cfg.prox_mu > 0:
            g = g + cfg.prox_mu * (w - anchor)
        return g

    return run_sgd(params, grad_fn, len(shard), cfg, rng_seed, step_size)


def gradient_norm_bound_estimate(traces: Sequence[UpdateTrace]) -> float:
    """Running maximum of every recorded stochastic-gradient norm."""
    if not traces:
        raise ValueError("need at least one trace")
    return max((max(t.grad_norms, default=0.0) for t in traces), default=0.0)
