"""Experiment orchestration: config -> data -> partition -> federation -> T rounds -> artifacts."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import algorithms
from .algorithms import Strategy, TheoremViolation, build_federation, ensemble_predict, served_models
from .data import (Dataset, Partition, SyntheticSpec, dirichlet_partition, generate_synthetic, load_idx,
                   nclass_partition)
from .metrics import (RoundRecord, adjusted_rand_index, cosine_similarity_matrix, macro_f1, micro_accuracy,
                      windowed_mean)
from .model import ModelSpec, SgdConfig

log = logging.getLogger(__name__)

F_SLACK = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    images: str = ""
    labels: str = ""
    n_classes: int = 0
    synthetic: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PartitionConfig:
    kind: str = "synthetic"
    m: int = 0
    k_true: int = 0
    alpha_cluster: float = 0.1
    alpha_client: float = 10.0
    n_cluster_classes: int = 3
    n_client_classes: int = 2


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "logistic"
    hidden_units: int = 0
    init: str = "zeros"
    init_std: float = 0.01


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "wecfl"
    k_clusters: int = 1
    weight_mode: str = "shard_size"
    base: str = ""
    ifca_weighting: str = "weighted"
    init_strategy: str = "kmeanspp"
    participation: float = 1.0
    rep_segments: tuple = ()


@dataclass(frozen=True)
class Seeds:
    data: int = 0
    init: int = 0
    train: int = 0


@dataclass(frozen=True)
class TheoremConfig:
    clamps: tuple = ("distance", "descent")
    eta_scale: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    seeds: Seeds = field(default_factory=Seeds)
    theorem: TheoremConfig = field(default_factory=TheoremConfig)
    rounds: int = 100
    window: int = 3
    theorem_check_mode: bool = False
    early_stop: bool = False
    test_fraction: float = 0.2
    n_workers: int = 1

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not 1 <= self.window <= self.rounds:
            raise ConfigError("window must lie in [1, rounds]")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.n_workers < 1:
            raise ConfigError("n_workers must be >= 1")
        if self.data.source not in ("synthetic", "idx"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.partition.kind not in ("synthetic", "dirichlet", "nclass"):
            raise ConfigError(f"unknown partition kind {self.partition.kind!r}")
        if self.data.source == "idx" and self.partition.kind == "synthetic":
            raise ConfigError("IDX data needs a dirichlet or nclass partition")
        bad = set(self.theorem.clamps) - {"distance", "descent"}
        if bad:
            raise ConfigError(f"unknown theorem clamps {sorted(bad)}")
        if self.theorem_check_mode:
            if self.strategy.kind not in ("wecfl", "fesem", "fedavg"):
                raise ConfigError("theorem_check_mode supports wecfl, fesem and fedavg only")
            if self.model.kind != "logistic":
                raise ConfigError("theorem_check_mode needs the convex logistic model")
            if self.strategy.participation != 1:
                raise ConfigError("theorem_check_mode needs full participation")


_SECTIONS = {
    "data": DataConfig, "partition": PartitionConfig, "model": ModelConfig, "strategy": StrategyConfig,
    "sgd": SgdConfig, "seeds": Seeds, "theorem": TheoremConfig,
}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {sorted(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = copy.deepcopy(doc)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            kwargs[name] = _build(cls, doc.pop(name), name)
    top = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(doc) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs.update(doc)
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _plain(x):
    if isinstance(x, tuple):
        return [_plain(v) for v in x]
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    return x


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(asdict(cfg))


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    summary: dict
    snapshots: list = field(default_factory=list)
    states: list = field(default_factory=list)
    partition: Partition | None = None
    dataset: Dataset | None = None
    artifacts: dict = field(default_factory=dict)


def build_data(cfg: ExperimentConfig) -> tuple[Dataset, Partition]:
    seed = cfg.seeds.data
    if cfg.data.source == "synthetic":
        try:
            spec = SyntheticSpec(**{**cfg.data.synthetic, "seed": seed})
        except TypeError as exc:
            raise ConfigError(f"[data.synthetic] {exc}") from exc
        dataset, native = generate_synthetic(spec)
        if cfg.partition.kind == "synthetic":
            return dataset, native
    else:
        dataset = load_idx(cfg.data.images, cfg.data.labels, cfg.data.n_classes or None)
    p = cfg.partition
    if p.kind == "dirichlet":
        part = dirichlet_partition(dataset, p.m, p.k_true, p.alpha_cluster, p.alpha_client, seed)
    else:
        part = nclass_partition(dataset, p.m, p.k_true, p.n_cluster_classes, p.n_client_classes, seed)
    return dataset, part


def model_spec(cfg: ExperimentConfig, dataset: Dataset) -> ModelSpec:
    m = cfg.model
    return ModelSpec(m.kind, dataset.n_features, dataset.n_classes, m.hidden_units, m.init, m.init_std)


def make_strategy(cfg: ExperimentConfig) -> Strategy:
    s, sgd = cfg.strategy, cfg.sgd
    clamp1 = clamp2 = False
    if cfg.theorem_check_mode:
        sgd = replace(sgd, full_batch=True, momentum=0.0)
        clamp1 = "distance" in cfg.theorem.clamps
        clamp2 = "descent" in cfg.theorem.clamps
    try:
        return Strategy(kind=s.kind, k_clusters=s.k_clusters, sgd=sgd, weight_mode=s.weight_mode,
                        base=s.base or None, ifca_weighting=s.ifca_weighting,
                        init_strategy=s.init_strategy, participation=s.participation,
                        rep_segments=tuple(s.rep_segments) or None, clamp_distance=clamp1,
                        clamp_descent=clamp2, eta_scale=cfg.theorem.eta_scale)
    except ValueError as exc:
        raise ConfigError(f"[strategy] {exc}") from exc


def member_seed(seed: int, j: int) -> int:
    return int(np.random.SeedSequence([int(seed), 1000 + j]).generate_state(1)[0])


def check_f_monotone(prev: RoundRecord | None, rec: RoundRecord) -> None:
    """Raise :class:`TheoremViolation` when F rises across an E, M or L step."""

    def rises(after, before):
        return after > before + F_SLACK * abs(before) + 1e-15

    if prev is not None and rises(rec.f_after_e, prev.f_after_l):
        raise TheoremViolation(rec.round, f"F rose across the E step ({prev.f_after_l!r} -> {rec.f_after_e!r})")
    if rises(rec.f_after_m, rec.f_after_e):
        raise TheoremViolation(rec.round, f"F rose across the M step ({rec.f_after_e!r} -> {rec.f_after_m!r})")
    if rises(rec.f_after_l, rec.f_after_m):
        raise TheoremViolation(rec.round, f"F rose across the local update ({rec.f_after_m!r} -> {rec.f_after_l!r})")


def _combine_members(t: int, recs: list, states: list, strategy: Strategy, truth) -> RoundRecord:
    """One ensemble record: member objectives averaged, accuracy from the soft vote."""
    spec = states[0].spec
    models = [served_models(s, strategy.member())[0] for s in states]
    preds, labels = [], []
    for c in states[0].clients:
        if c.test is None:
            continue
        preds.append(ensemble_predict(models, spec, c.test.features).argmax(axis=1))
        labels.append(c.test.labels)
    acc = f1 = None
    if preds:
        p, y = np.concatenate(preds), np.concatenate(labels)
        acc, f1 = micro_accuracy(p, y), macro_f1(p, y, spec.n_classes)
    mean = lambda xs: float(np.mean(xs))
    zeros = [0] * len(states[0].clients)
    return RoundRecord(
        round=t, f_after_e=mean([r.f_after_e for r in recs]), f_after_m=mean([r.f_after_m for r in recs]),
        f_after_l=mean([r.f_after_l for r in recs]), r_value=mean([r.r_value for r in recs]),
        micro_acc=acc, macro_f1=f1, b_per_cluster=[b for r in recs for b in r.b_per_cluster],
        eta_bounds=[e for r in recs for e in r.eta_bounds], assignment_snapshot=zeros,
        ari_vs_truth=adjusted_rand_index(zeros, truth) if truth is not None else None,
        r_after_m=mean([r.r_after_m for r in recs]), u_estimate=max(r.u_estimate for r in recs),
        mean_sq_grad=mean([r.mean_sq_grad for r in recs]), steps=recs[0].steps,
    )


def _converged(records: list, patience: int = 5, tol: float = 1e-6) -> bool:
    if len(records) <= patience:
        return False
    fs = [r.f_after_l for r in records[-(patience + 1):]]
    return all(abs(b - a) / max(abs(a), 1e-12) < tol for a, b in zip(fs, fs[1:]))


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   dataset: Dataset | None = None, partition: Partition | None = None) -> ExperimentResult:
    """Run ``cfg.rounds`` communication rounds; deterministic given the three seed streams."""
    if dataset is None or partition is None:
        dataset, partition = build_data(cfg)
    partition.validate_against(len(dataset))
    spec = model_spec(cfg, dataset)
    strategy = make_strategy(cfg)
    seeds = cfg.seeds

    if strategy.kind == "ensemble":
        member = strategy.member()
        runs = [(member_seed(seeds.init, j), member_seed(seeds.train, j)) for j in range(strategy.k_clusters)]
    else:
        member = strategy
        runs = [(seeds.init, seeds.train)]
    states = [build_federation(dataset, partition, spec, member, init_seed=i, train_seed=tr,
                               split_seed=seeds.data, test_fraction=cfg.test_fraction,
                               n_workers=cfg.n_workers) for i, tr in runs]

    records, snapshots = [], []
    for t in range(1, cfg.rounds + 1):
        recs = []
        for j, (_, train_seed) in enumerate(runs):
            states[j], rec = algorithms.run_round(states[j], member, train_seed)
            recs.append(rec)
        if strategy.kind == "ensemble":
            rec = _combine_members(t, recs, states, strategy, states[0].truth)
        else:
            rec = recs[0]
            if cfg.theorem_check_mode:
                check_f_monotone(records[-1] if records else None, rec)
        records.append(rec)
        snapshots.append({
            "round": t,
            "assignment": rec.assignment_snapshot,
            "centroids": [m.tolist() for s in states for m in s.models()],
        })
        log.info("round %d: acc=%s F=%.6g R=%.6g ARI=%s", t, rec.micro_acc, rec.f_after_l, rec.r_value,
                 rec.ari_vs_truth)
        if cfg.early_stop and _converged(records):
            log.info("early stop after round %d", t)
            break

    result = ExperimentResult(cfg, records, summarize(records, cfg.window), snapshots, states, partition, dataset)
    if out_dir is not None:
        result.artifacts = write_artifacts(result, out_dir)
    return result


def r_monotone_report(records: list, slack: float = 1e-7) -> dict:
    """Where, if anywhere, R measured after the M step first rises."""
    pairs = [(r.round, r.r_after_m) for r in records if r.r_after_m is not None]
    for (_, prev), (t, cur) in zip(pairs, pairs[1:]):
        if cur > prev + slack * abs(prev):
            return {"monotone": False, "first_violation_round": t}
    return {"monotone": True, "first_violation_round": None}


def recovery_round(records: list) -> int | None:
    """First round from which the assignment matches ground truth exactly (ARI 1) for good."""
    found = None
    for r in records:
        if r.ari_vs_truth is not None and r.ari_vs_truth == 1.0:
            found = r.round if found is None else found
        else:
            found = None
    return found


def summarize(records: list, window: int) -> dict:
    acc_mean, acc_std = windowed_mean([r.micro_acc for r in records], window)
    f1_mean, f1_std = windowed_mean([r.macro_f1 for r in records], window)
    last = records[-1]
    sq = [r.mean_sq_grad for r in records if r.mean_sq_grad is not None]
    running = np.cumsum(sq) / np.arange(1, len(sq) + 1) if sq else [None]
    return {
        "rounds_run": len(records),
        "window": window,
        "micro_acc_mean": acc_mean,
        "micro_acc_std_rounds": acc_std,
        "macro_f1_mean": f1_mean,
        "macro_f1_std_rounds": f1_std,
        "final_f": last.f_after_l,
        "final_r": last.r_value,
        "final_ari": last.ari_vs_truth,
        "cluster_recovery_round": recovery_round(records),
        "u_estimate": last.u_estimate,
        "r_after_m": r_monotone_report(records),
        "grad_sq_running_mean": None if running[-1] is None else float(running[-1]),
    }


def _jsonable(x):
    if isinstance(x, float):
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(x, (np.floating,)):
        return _jsonable(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), allow_nan=False)


def _write_matrix(path: Path, M: np.ndarray, labels: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + labels)
        for lab, row in zip(labels, M):
            w.writerow([lab] + [repr(float(v)) for v in row])


def _cosine_or_nan(V: np.ndarray) -> np.ndarray:
    try:
        return cosine_similarity_matrix(V)
    except ValueError:
        return np.full((V.shape[0], V.shape[0]), np.nan)


def partition_stats_rows(dataset: Dataset, partition: Partition) -> list[list]:
    """Rows of the partition report: per-client counts, per-cluster histograms, L1 distances."""
    C = dataset.n_classes
    hists = np.array([np.bincount(dataset.labels[s], minlength=C) for s in partition.client_shards])
    truth = np.array(partition.cluster_of_client)
    rows = [["kind", "id", "cluster", "n_samples"] + [f"class_{c}" for c in range(C)]]
    for i, h in enumerate(hists):
        rows.append(["client", i, int(truth[i]), int(h.sum())] + h.tolist())
    for k in np.unique(truth):
        h = hists[truth == k].sum(axis=0)
        rows.append(["cluster", int(k), int(k), int(h.sum())] + h.tolist())
    dist = hists / hists.sum(axis=1, keepdims=True)
    intra, inter = [], []
    for i in range(len(dist)):
        for j in range(i + 1, len(dist)):
            d = float(np.abs(dist[i] - dist[j]).sum())
            (intra if truth[i] == truth[j] else inter).append(d)
    for name, vals in (("l1_intra_mean", intra), ("l1_inter_mean", inter)):
        rows.append([name, "", "", len(vals), repr(float(np.mean(vals))) if vals else ""] + [""] * (C - 1))
    return rows


def write_partition_stats(dataset: Dataset, partition: Partition, path: Path) -> list[list]:
    rows = partition_stats_rows(dataset, partition)
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    return rows


def write_artifacts(result: ExperimentResult, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / name for name in (
        "summary.json", "rounds.jsonl", "assignments.jsonl", "client_params.csv",
        "cosine_clusters.csv", "cosine_clients.csv", "partition_stats.csv")}
    with open(paths["rounds.jsonl"], "w") as fh:
        for r in result.records:
            fh.write(dumps(r.to_dict()) + "\n")
    with open(paths["assignments.jsonl"], "w") as fh:
        for s in result.snapshots:
            fh.write(dumps(s) + "\n")
    state = result.states[0]
    P = state.client_params()
    with open(paths["client_params.csv"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "truth", "cluster", "weight"] + [f"p{j}" for j in range(P.shape[1])])
        truth = state.truth or [""] * len(state.clients)
        for c, t, row in zip(state.clients, truth, P):
            w.writerow([c.index, t, c.cluster, repr(c.weight)] + [repr(float(v)) for v in row])
    models = np.stack([m for s in result.states for m in s.models()])
    _write_matrix(paths["cosine_clusters.csv"], _cosine_or_nan(models), [f"cluster_{k}" for k in range(len(models))])
    _write_matrix(paths["cosine_clients.csv"], _cosine_or_nan(P), [f"client_{i}" for i in range(len(P))])
    write_partition_stats(result.dataset, result.partition, paths["partition_stats.csv"])
    paths["summary.json"].write_text(json.dumps(_jsonable(result.summary), indent=2, sort_keys=True) + "\n")
    return {k: str(v) for k, v in paths.items()}


AXIS_ALIASES = {
    "k_clusters": "strategy.k_clusters",
    "kind": "strategy.kind",
    "seed(training)": "seeds.train",
    "seed_train": "seeds.train",
    "seed(init)": "seeds.init",
    "learning_rate": "sgd.learning_rate",
}


def set_path(doc: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            raise ConfigError(f"unknown config path {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config path {dotted!r}")
    node[keys[-1]] = value


def sweep(base: ExperimentConfig, axis: str, values: list, out_dir: str | Path | None = None) -> list:
    """Independent runs varying one config field; the data seed (hence the partition) stays fixed."""
    path = AXIS_ALIASES.get(axis, axis)
    doc = config_to_dict(base)
    set_path(copy.deepcopy(doc), path, None)  # validates the axis even for an empty value list
    if path == "seeds.data":
        raise ConfigError("sweeping the data seed would change the partition")
    results = []
    for v in values:
        d = copy.deepcopy(doc)
        set_path(d, path, v)
        cfg = config_from_dict(d)
        sub = None if out_dir is None else Path(out_dir) / f"{path}={v}"
        results.append(run_experiment(cfg, sub))
    return results


def sweep_summary(axis: str, values: list, results: list) -> dict:
    """Per-value windowed means plus the across-run spread (seed-level variance)."""
    accs = [r.summary["micro_acc_mean"] for r in results]
    f1s = [r.summary["macro_f1_mean"] for r in results]
    valid = [a for a in accs if a is not None]
    valid_f1 = [f for f in f1s if f is not None]
    return {
        "axis": axis,
        "values": list(values),
        "runs": [r.summary for r in results],
        "micro_acc_mean_across_runs": float(np.mean(valid)) if valid else None,
        "micro_acc_std_across_runs": float(np.std(valid)) if valid else None,
        "macro_f1_mean_across_runs": float(np.mean(valid_f1)) if valid_f1 else None,
        "macro_f1_std_across_runs": float(np.std(valid_f1)) if valid_f1 else None,
    }
