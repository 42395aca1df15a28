"""Federated training strategies: WeCFL, FeSEM, IFCA, FedAvg, FedProx and soft-voting ensembles.

Every clustered strategy runs the same four-step communication round:
expectation (assign clients), maximization (aggregate cluster models),
distribution (broadcast) and local update (Q SGD steps per client). The
strategies differ only in how clients are assigned and which weights the
aggregation uses.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import clustering
from .data import Dataset
from .metrics import (RoundRecord, adjusted_rand_index, clusterability_b, macro_f1,
                      micro_accuracy, weighted_objective)
from .model import (ModelSpec, SgdConfig, UpdateTrace, forward, gradient, init_params, local_update,
                    loss, smoothness_bound)

KINDS = ("fedavg", "fedprox", "ifca", "fesem", "wecfl", "ensemble")


@dataclass(frozen=True)
class Strategy:
    kind: str = "wecfl"
    k_clusters: int = 1
    sgd: SgdConfig = field(default_factory=SgdConfig)
    weight_mode: str = "shard_size"
    base: str | None = None
    ifca_weighting: str = "weighted"
    init_strategy: str = "kmeanspp"
    participation: float = 1.0
    rep_segments: tuple | None = None
    clamp_distance: bool = False
    clamp_descent: bool = False
    eta_scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy kind {self.kind!r}")
        if self.k_clusters < 1:
            raise ValueError("k_clusters must be >= 1")
        if self.kind in ("fedavg", "fedprox") and self.k_clusters != 1:
            raise ValueError(f"{self.kind} trains a single model; k_clusters must be 1")
        if self.kind == "ensemble" and self.base not in ("fedavg", "fedprox"):
            raise ValueError("ensemble wraps only fedavg or fedprox")
        if self.weight_mode not in ("shard_size", "uniform"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")
        if self.ifca_weighting not in ("weighted", "uniform"):
            raise ValueError(f"unknown ifca_weighting {self.ifca_weighting!r}")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if self.eta_scale < 0:
            raise ValueError("eta_scale must be >= 0")

    def member(self, j: int = 0) -> "Strategy":
        """The single-model strategy trained by ensemble member ``j``."""
        return replace(self, kind=self.base, k_clusters=1, base=None)


@dataclass
class ClientState:
    index: int
    train: Dataset
    test: Dataset | None
    weight: float
    params: np.ndarray
    cluster: int = 0
    beta: float | None = None


@dataclass
class ClusterState:
    model: np.ndarray
    members: list = field(default_factory=list)


@dataclass
class FederationState:
    spec: ModelSpec
    clients: list
    clusters: list
    round: int = 0
    truth: list | None = None
    u_estimate: float = 0.0
    rep_mask: np.ndarray | None = None
    n_workers: int = 1

    @property
    def k(self) -> int:
        return len(self.clusters)

    def mask(self) -> np.ndarray:
        return self.spec.layout.mask() if self.rep_mask is None else self.rep_mask

    def client_params(self) -> np.ndarray:
        return np.stack([c.params for c in self.clients])

    def models(self) -> np.ndarray:
        return np.stack([c.model for c in self.clusters])

    def assignment(self) -> np.ndarray:
        return np.array([c.cluster for c in self.clients], dtype=np.int64)

    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.clients], dtype=np.float64)

    def copy(self) -> "FederationState":
        clients = [replace(c, params=c.params.copy()) for c in self.clients]
        clusters = [ClusterState(c.model.copy(), list(c.members)) for c in self.clusters]
        return replace(self, clients=clients, clusters=clusters)


class TheoremViolation(RuntimeError):
    def __init__(self, round_index: int, message: str):
        super().__init__(f"round {round_index}: {message}")
        self.round_index = round_index


def theorem_eta_bound(client_params, centroid, q: int, u_estimate: float) -> float:
    """Largest step size keeping a client within its pre-round distance of the centroid.

    Zero when the client already sits on the centroid; ``inf`` when ``U`` is 0.
    """
    dist = float(np.linalg.norm(np.asarray(client_params) - np.asarray(centroid)))
    if dist == 0:
        return 0.0
    if u_estimate == 0:
        return math.inf
    return dist / (q * u_estimate)


def descent_eta_bound(grad_sq: float, b: float | None, u_estimate: float, beta: float,
                       sigma_sq: float = 0.0) -> float:
    """Plug-in descent bound ``(G - B U^2)/(G + sigma^2) * 2/beta``, floored at 0."""
    if b is None or grad_sq + sigma_sq == 0:
        return 0.0
    return max(0.0, (grad_sq - b * u_estimate ** 2) / (grad_sq + sigma_sq)) * 2.0 / beta


def ensemble_predict(models, spec: ModelSpec, features) -> np.ndarray:
    """Soft vote: average the class-probability outputs of every model."""
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    probs = [forward(np.asarray(m), spec, features) for m in models]
    return np.mean(probs, axis=0)


def ifca_assign(loss_table) -> np.ndarray:
    """Each client (row) joins the cluster (column) with the lowest loss; ties to the lowest index."""
    L = np.asarray(loss_table, dtype=np.float64)
    return L.argmin(axis=1)


def loss_table(state: FederationState) -> np.ndarray:
    return np.array([[loss(cl.model, state.spec, c.train) for cl in state.clusters]
                     for c in state.clients])


def clustering_weights(state: FederationState, strategy: Strategy) -> np.ndarray:
    """Weights used by the clustering objective and the aggregation."""
    if strategy.kind == "fesem":
        return np.ones(len(state.clients))
    if strategy.kind == "ifca" and strategy.ifca_weighting == "uniform":
        return np.ones(len(state.clients))
    return state.weights()


def served_models(state: FederationState, strategy: Strategy) -> np.ndarray:
    """Cluster models built from the clients' current parameters under the current assignment."""
    return clustering.m_step(state.client_params(), state.assignment(),
                             clustering_weights(state, strategy), state.k, previous=state.models())


def evaluate(state: FederationState, strategy: Strategy, models=None) -> tuple[float | None, float | None]:
    """Pooled micro accuracy and macro F1 over every client's held-out shard."""
    if models is None:
        models = served_models(state, strategy)
    preds, truth = [], []
    for c in state.clients:
        if c.test is None or len(c.test) == 0:
            continue
        preds.append(forward(models[c.cluster], state.spec, c.test.features).argmax(axis=1))
        truth.append(c.test.labels)
    if not preds:
        return None, None
    p, t = np.concatenate(preds), np.concatenate(truth)
    return micro_accuracy(p, t), macro_f1(p, t, state.spec.n_classes)


def client_seed(seed: int, round_index: int, client_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(round_index), int(client_index)])


def _participants(m: int, strategy: Strategy, seed: int, round_index: int) -> np.ndarray:
    if strategy.participation >= 1:
        return np.arange(m)
    n = max(1, math.ceil(strategy.participation * m))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(round_index), 2 ** 31]))
    return np.sort(rng.choice(m, size=n, replace=False))


def _local_job(state, strategy, cfg, client, start, anchor, seed, b_k, u, dist, g0_norm):
    """Run one client's local update, clamping the step size when a theorem check asks for it.

    The distance clamp uses the federation-wide running bound on gradient
    norms; the descent clamp uses the largest gradient norm of this round's
    own trajectory. Either bound is raised and the update redone whenever the
    trajectory exceeds it, so the clamps hold for the gradients actually used.
    """
    if not (strategy.clamp_distance or strategy.clamp_descent):
        return local_update(start, state.spec, client.train, cfg, seed, prox_anchor=anchor)
    q_steps = cfg.local_steps
    u1, u2 = max(u, g0_norm), g0_norm
    for _ in range(100):
        bound1 = 0.0 if dist == 0 else (dist / (q_steps * u1) if u1 > 0 else math.inf)

        def step_size(q, g, u2=u2, bound1=bound1):
            eta = cfg.learning_rate
            if strategy.clamp_distance:
                eta = min(eta, bound1)
            if strategy.clamp_descent:
                eta = min(eta, descent_eta_bound(float(g @ g), b_k, u2, client.beta))
            return eta * strategy.eta_scale

        new, trace = local_update(start, state.spec, client.train, cfg, seed,
                                  prox_anchor=anchor, step_size=step_size)
        top = max(trace.grad_norms)
        redo = False
        if strategy.clamp_distance and top > u1:
            u1, redo = top, True
        if strategy.clamp_descent and top > u2:
            u2, redo = top, True
        if not redo:
            return new, trace
    raise RuntimeError(f"client {client.index}: gradient-norm bound did not stabilise")


def _round(state: FederationState, strategy: Strategy, seed: int) -> tuple[FederationState, RoundRecord]:
    state = state.copy()
    t = state.round + 1
    spec, m, K = state.spec, len(state.clients), state.k
    mask = state.mask()
    lam = clustering_weights(state, strategy)
    cfg = strategy.sgd if strategy.kind == "fedprox" else replace(strategy.sgd, prox_mu=0.0)
    steps = []

    old_params = state.client_params()
    reps = old_params[:, mask]

    # expectation
    if strategy.kind in ("wecfl", "fesem"):
        assignment = clustering.e_step(reps, state.models()[:, mask], lam)
    elif strategy.kind == "ifca":
        assignment = ifca_assign(loss_table(state))
    else:
        assignment = np.zeros(m, dtype=np.int64)
    for c, k in zip(state.clients, assignment):
        c.cluster = int(k)
    f_after_e = clustering.objective_f(reps, assignment, state.models()[:, mask], lam)
    steps.append("E")

    # maximization over the round's participants
    part = _participants(m, strategy, seed, t)
    models = clustering.m_step(old_params[part], assignment[part], lam[part], K, previous=state.models())
    for k, cl in enumerate(state.clusters):
        cl.model = models[k].copy()
        cl.members = [int(i) for i in np.flatnonzero(assignment == k)]
    centroids = models[:, mask]
    f_after_m = clustering.objective_f(reps, assignment, centroids, lam)
    r_after_m = weighted_objective([loss(models[k], spec, c.train) for c, k in zip(state.clients, assignment)], lam)
    steps.append("M")

    # distribution
    starts = {int(i): models[assignment[i]].copy() for i in part}
    for i, start in starts.items():
        state.clients[i].params = start
    first_grads = {i: gradient(starts[i], spec, state.clients[i].train) for i in starts}
    b_per_cluster = []
    for k in range(K):
        members = [i for i in part if assignment[i] == k]
        if not members:
            b_per_cluster.append(None)
            continue
        b_per_cluster.append(clusterability_b([first_grads[i] for i in members], lam[members]))
    eta_bounds = [theorem_eta_bound(reps[i], centroids[assignment[i]], cfg.local_steps, state.u_estimate)
                  for i in range(m)]
    steps.append("D")

    # local update
    jobs = []
    for i in part:
        i = int(i)
        client = state.clients[i]
        dist = float(np.linalg.norm(reps[i] - centroids[assignment[i]]))
        jobs.append((state, strategy, cfg, client, starts[i], starts[i], client_seed(seed, t, i),
                     b_per_cluster[assignment[i]], state.u_estimate, dist,
                     float(np.linalg.norm(first_grads[i]))))
    if state.n_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=state.n_workers) as pool:
            results = list(pool.map(lambda a: _local_job(*a), jobs))
    else:
        results = [_local_job(*a) for a in jobs]
    traces: list[UpdateTrace] = []
    for i, (new, trace) in zip(part, results):
        state.clients[int(i)].params = new
        traces.append(trace)
    steps.append("L")
    u_new = max([state.u_estimate] + [max(tr.grad_norms) for tr in traces])

    new_params = state.client_params()
    f_after_l = clustering.objective_f(new_params[:, mask], assignment, centroids, lam)
    r_value = weighted_objective([loss(c.params, spec, c.train) for c in state.clients], lam)
    sq = [float(np.mean(np.square(tr.grad_norms))) for tr in traces]
    mean_sq_grad = weighted_objective(sq, lam[part])

    state.round = t
    state.u_estimate = u_new
    acc, f1 = evaluate(state, strategy)
    ari = adjusted_rand_index(assignment, state.truth) if state.truth is not None else None
    record = RoundRecord(
        round=t, f_after_e=f_after_e, f_after_m=f_after_m, f_after_l=f_after_l, r_value=r_value,
        micro_acc=acc, macro_f1=f1, b_per_cluster=b_per_cluster, eta_bounds=eta_bounds,
        assignment_snapshot=assignment.tolist(), ari_vs_truth=ari, r_after_m=r_after_m,
        u_estimate=u_new, mean_sq_grad=mean_sq_grad, steps=steps,
    )
    return state, record


def _require(strategy: Strategy, *kinds: str) -> None:
    if strategy.kind not in kinds:
        raise ValueError(f"strategy kind {strategy.kind!r} passed to a {'/'.join(kinds)} round")


def wecfl_round(state: FederationState, strategy: Strategy, seed: int):
    _require(strategy, "wecfl")
    return _round(state, strategy, seed)


def fesem_round(state: FederationState, strategy: Strategy, seed: int):
    _require(strategy, "fesem")
    return _round(state, strategy, seed)


def ifca_round(state: FederationState, strategy: Strategy, seed: int):
    _require(strategy, "ifca")
    return _round(state, strategy, seed)


def fedavg_round(state: FederationState, strategy: Strategy, seed: int):
    _require(strategy, "fedavg")
    if state.k != 1:
        raise ValueError("fedavg needs exactly one cluster")
    return _round(state, strategy, seed)


def fedprox_round(state: FederationState, strategy: Strategy, seed: int):
    _require(strategy, "fedprox")
    if state.k != 1:
        raise ValueError("fedprox needs exactly one cluster")
    return _round(state, strategy, seed)


ROUNDS = {
    "wecfl": wecfl_round,
    "fesem": fesem_round,
    "ifca": ifca_round,
    "fedavg": fedavg_round,
    "fedprox": fedprox_round,
}


def run_round(state: FederationState, strategy: Strategy, seed: int):
    return ROUNDS[strategy.kind](state, strategy, seed)


def build_federation(dataset: Dataset, partition, spec: ModelSpec, strategy: Strategy, *,
                     init_seed: int = 0, train_seed: int = 0, split_seed: int = 0,
                     test_fraction: float = 0.2, n_workers: int = 1) -> FederationState:
    """Split shards into train/test, set weights, and initialise client and cluster models.

    Single-model strategies start every client from one shared initial model.
    Clustered strategies first let each client run one local update from that
    model, then seed the K cluster models from the resulting client parameters.
    """
    from .data import train_test_split

    if strategy.kind == "ensemble":
        raise ValueError("build one federation per ensemble member with strategy.member()")
    rng = np.random.default_rng(np.random.SeedSequence([int(split_seed), 7]))
    clients = []
    w0 = init_params(spec, init_seed)
    for i, shard in enumerate(partition.client_shards):
        tr, te = train_test_split(shard, test_fraction, rng)
        train = dataset.subset(tr)
        test = dataset.subset(te) if te.size else None
        weight = float(len(train)) if strategy.weight_mode == "shard_size" else 1.0
        clients.append(ClientState(i, train, test, weight, w0.copy()))

    mask = spec.layout.mask(strategy.rep_segments)
    state = FederationState(spec, clients, [], truth=list(partition.cluster_of_client),
                            rep_mask=None if mask.all() else mask, n_workers=n_workers)
    if strategy.clamp_descent:
        for c in clients:
            c.beta = smoothness_bound(spec, c.train)

    K = strategy.k_clusters
    if strategy.kind in ("fedavg", "fedprox"):
        state.clusters = [ClusterState(w0.copy(), list(range(len(clients))))]
        return state

    cfg = replace(strategy.sgd, prox_mu=0.0)
    traces = []
    for c in clients:
        c.params, tr = local_update(w0, spec, c.train, cfg, client_seed(train_seed, 0, c.index))
        traces.append(tr)
    state.u_estimate = max(max(t.grad_norms) for t in traces)
    P = state.client_params()
    chosen = clustering.init_centroid_indices(P[:, state.mask()], K, strategy.init_strategy, init_seed)
    state.clusters = [ClusterState(P[i].copy()) for i in chosen]
    lam = clustering_weights(state, strategy)
    assignment = clustering.e_step(P[:, state.mask()], state.models()[:, state.mask()], lam)
    for c, k in zip(clients, assignment):
        c.cluster = int(k)
    return state
