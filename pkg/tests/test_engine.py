import json
import struct

import numpy as np
import pytest

from clusterfl.algorithms import TheoremViolation, client_seed
from clusterfl.engine import (ConfigError, build_data, check_f_monotone, config_from_dict, config_to_dict, dumps,
                              partition_stats_rows, recovery_round, run_experiment, summarize, sweep, sweep_summary)
from clusterfl.metrics import RoundRecord
from clusterfl.model import SgdConfig, init_params, local_update


def small_doc(**top):
    doc = {
        "rounds": 4,
        "window": 2,
        "data": {"synthetic": {"n_clusters_true": 2, "clients_per_cluster": 3, "samples_per_client": 60,
                               "n_features": 4, "n_classes": 3}},
        "partition": {"kind": "synthetic"},
        "strategy": {"kind": "wecfl", "k_clusters": 2},
        "sgd": {"learning_rate": 0.05, "batch_size": 16, "local_steps": 5},
        "seeds": {"data": 1, "init": 2, "train": 3},
    }
    doc.update(top)
    return doc


def test_config_round_trip_and_unknown_keys():
    cfg = config_from_dict(small_doc())
    assert config_from_dict(config_to_dict(cfg)) == cfg
    with pytest.raises(ConfigError):
        config_from_dict(small_doc(bogus=1))
    bad = small_doc()
    bad["sgd"]["lr"] = 0.1
    with pytest.raises(ConfigError):
        config_from_dict(bad)


@pytest.mark.parametrize("patch", [dict(rounds=0), dict(window=9), dict(test_fraction=1.0), dict(n_workers=0)])
def test_config_invariants(patch):
    with pytest.raises(ConfigError):
        config_from_dict(small_doc(**patch))


def test_theorem_mode_restrictions():
    doc = small_doc(theorem_check_mode=True)
    doc["strategy"]["kind"] = "ifca"
    with pytest.raises(ConfigError):
        config_from_dict(doc)
    doc = small_doc(theorem_check_mode=True, model={"kind": "mlp1", "hidden_units": 3})
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_degenerate_federation_is_one_local_update():
    doc = small_doc(rounds=1, window=1, test_fraction=0.0)
    doc["data"]["synthetic"].update(n_clusters_true=1, clients_per_cluster=1)
    doc["strategy"] = {"kind": "fedavg", "k_clusters": 1}
    cfg = config_from_dict(doc)
    res = run_experiment(cfg)
    assert len(res.records) == 1
    d, p = build_data(cfg)
    shard = d.subset(np.sort(p.client_shards[0]))
    spec = res.states[0].spec
    w, _ = local_update(init_params(spec, 2), spec, shard, cfg.sgd, client_seed(3, 1, 0))
    assert res.states[0].clients[0].params.tobytes() == w.tobytes()


def test_runs_are_bit_identical(tmp_path):
    cfg = config_from_dict(small_doc())
    a = run_experiment(cfg, tmp_path / "a")
    b = run_experiment(cfg, tmp_path / "b")
    for name in ("rounds.jsonl", "assignments.jsonl", "client_params.csv", "summary.json", "partition_stats.csv",
                 "cosine_clients.csv", "cosine_clusters.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert [dumps(r.to_dict()) for r in a.records] == [dumps(r.to_dict()) for r in b.records]


def test_summary_is_mean_of_last_three_rounds():
    doc = small_doc(rounds=100, window=3)
    doc["data"]["synthetic"].update(clients_per_cluster=1, samples_per_client=30)
    doc["sgd"]["local_steps"] = 1
    res = run_experiment(config_from_dict(doc))
    accs = [r.micro_acc for r in res.records]
    assert len(accs) == 100
    assert res.summary["micro_acc_mean"] == pytest.approx(np.mean(accs[97:]))
    assert res.summary["micro_acc_std_rounds"] == pytest.approx(np.std(accs[97:]))


def test_artifacts_written_and_parseable(tmp_path):
    res = run_experiment(config_from_dict(small_doc()), tmp_path)
    lines = (tmp_path / "rounds.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    for key in ("round", "f_after_e", "f_after_m", "f_after_l", "r_value", "micro_acc", "macro_f1",
                "b_per_cluster", "eta_bounds", "assignment_snapshot", "ari_vs_truth"):
        assert key in rec
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["rounds_run"] == 4
    header = (tmp_path / "client_params.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["client", "truth", "cluster", "weight"]
    assert set(res.artifacts) >= {"summary.json", "rounds.jsonl", "cosine_clients.csv"}


def test_ensemble_strategy_runs():
    doc = small_doc()
    doc["strategy"] = {"kind": "ensemble", "base": "fedprox", "k_clusters": 3}
    doc["sgd"]["prox_mu"] = 0.95
    res = run_experiment(config_from_dict(doc))
    assert len(res.states) == 3 and res.records[-1].micro_acc is not None


@pytest.mark.parametrize("kind", ["ifca", "fesem", "fedavg", "fedprox"])
def test_other_strategies_run(kind):
    doc = small_doc()
    doc["strategy"] = {"kind": kind, "k_clusters": 1 if kind.startswith("fed") else 2}
    assert len(run_experiment(config_from_dict(doc)).records) == 4


def test_early_stop_on_frozen_run():
    doc = small_doc(rounds=30, early_stop=True)
    doc["sgd"]["learning_rate"] = 0.0
    res = run_experiment(config_from_dict(doc))
    assert len(res.records) < 30


def _rec(t, e, m, l):
    return RoundRecord(t, e, m, l, 0.0, None, None, [], [], [], None)


def test_check_f_monotone_flags_each_step():
    check_f_monotone(_rec(1, 1.0, 1.0, 2.0), _rec(2, 2.0, 1.5, 1.0))
    with pytest.raises(TheoremViolation) as exc:
        check_f_monotone(_rec(1, 1.0, 1.0, 1.0), _rec(2, 1.1, 1.0, 1.0))
    assert exc.value.round_index == 2
    with pytest.raises(TheoremViolation):
        check_f_monotone(None, _rec(1, 1.0, 1.5, 1.0))
    with pytest.raises(TheoremViolation):
        check_f_monotone(None, _rec(1, 1.0, 0.5, 0.6))


def test_theorem_mode_injected_fault_raises():
    doc = small_doc(rounds=5, theorem_check_mode=True, theorem={"clamps": ["distance"], "eta_scale": 50.0})
    doc["sgd"]["learning_rate"] = 5.0
    with pytest.raises(TheoremViolation):
        run_experiment(config_from_dict(doc))


def test_recovery_round_needs_a_stable_suffix():
    recs = [RoundRecord(t, 0, 0, 0, 0, None, None, [], [], [], a) for t, a in enumerate([0.2, 1.0, 0.5, 1.0, 1.0], 1)]
    assert recovery_round(recs) == 4
    assert summarize(recs, 2)["cluster_recovery_round"] == 4


# --- sweeps ---

def test_sweep_k_shares_partition():
    cfg = config_from_dict(small_doc(rounds=2, window=1))
    res = sweep(cfg, "k_clusters", [1, 2, 3])
    assert [r.config.strategy.k_clusters for r in res] == [1, 2, 3]
    assert len({r.partition.to_json() for r in res}) == 1
    assert [r.states[0].k for r in res] == [1, 2, 3]


def test_sweep_empty_and_seed_axis():
    cfg = config_from_dict(small_doc(rounds=2, window=1))
    assert sweep(cfg, "k_clusters", []) == []
    res = sweep(cfg, "seed(training)", [0, 1, 2, 3, 4])
    assert len(res) == 5
    s = sweep_summary("seed(training)", [0, 1, 2, 3, 4], res)
    assert s["micro_acc_std_across_runs"] is not None and len(s["runs"]) == 5


def test_sweep_rejects_unknown_axis_and_data_seed():
    cfg = config_from_dict(small_doc(rounds=2, window=1))
    with pytest.raises(ConfigError):
        sweep(cfg, "strategy.nope", [1])
    with pytest.raises(ConfigError):
        sweep(cfg, "seeds.data", [1, 2])


# --- partition stats / data sources ---

def test_partition_stats_single_client_is_global_histogram():
    doc = small_doc()
    doc["data"]["synthetic"].update(n_clusters_true=1, clients_per_cluster=1)
    d, p = build_data(config_from_dict(doc))
    rows = partition_stats_rows(d, p)
    client = [r for r in rows if r[0] == "client"]
    assert len(client) == 1 and client[0][4:] == np.bincount(d.labels, minlength=3).tolist()


def test_partition_stats_nclass_rows_have_two_classes():
    doc = small_doc()
    doc["data"]["synthetic"].update(n_clusters_true=1, clients_per_cluster=1, samples_per_client=1000,
                                    n_classes=10)
    doc["partition"] = {"kind": "nclass", "m": 10, "k_true": 5, "n_cluster_classes": 3, "n_client_classes": 2}
    d, p = build_data(config_from_dict(doc))
    for row in partition_stats_rows(d, p):
        if row[0] == "client":
            assert sum(1 for v in row[4:] if v > 0) == 2


def test_dirichlet_partition_via_config():
    doc = small_doc()
    doc["partition"] = {"kind": "dirichlet", "m": 6, "k_true": 2, "alpha_cluster": 0.5, "alpha_client": 10.0}
    d, p = build_data(config_from_dict(doc))
    assert p.n_clients == 6
    p.validate_against(len(d))


def test_idx_source(tmp_path):
    r = np.random.default_rng(0)
    n = 60
    img = struct.pack(">IIII", 0x803, n, 2, 2) + r.integers(0, 256, size=n * 4, dtype=np.uint8).tobytes()
    lab = struct.pack(">II", 0x801, n) + bytes(np.tile(np.arange(3), 20).astype(np.uint8))
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    doc = small_doc(rounds=2, window=1)
    doc["data"] = {"source": "idx", "images": str(tmp_path / "i"), "labels": str(tmp_path / "l")}
    doc["partition"] = {"kind": "dirichlet", "m": 4, "k_true": 2}
    res = run_experiment(config_from_dict(doc))
    assert res.states[0].spec.n_features == 4 and len(res.records) == 2


def test_dumps_handles_inf_and_nan():
    assert json.loads(dumps({"a": float("inf"), "b": float("nan"), "c": np.float64(1.5)})) == \
        {"a": "inf", "b": None, "c": 1.5}
