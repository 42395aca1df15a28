# %% [markdown]
# # How many clusters?
#
# Sweep K on a task with four true clusters. The partition is built once from
# the data seed and shared by every run; across-run spread over training
# seeds is reported separately from the last-rounds window.

# %%
from clusterfl.engine import config_from_dict, sweep, sweep_summary

base = config_from_dict({
    "rounds": 15,
    "data": {"synthetic": {"n_clusters_true": 4, "clients_per_cluster": 6}},
    "partition": {"kind": "synthetic"},
    "strategy": {"kind": "wecfl", "k_clusters": 4},
    "sgd": {"learning_rate": 0.05},
})
for k, res in zip([1, 2, 4, 8], sweep(base, "k_clusters", [1, 2, 4, 8])):
    print(f"K={k}: acc {res.summary['micro_acc_mean']:.2f}  F {res.summary['final_f']:.4f}")

# %%
seeds = [0, 1, 2, 3, 4]
s = sweep_summary("seeds.train", seeds, sweep(base, "seeds.train", seeds))
print(f"K=4 over 5 training seeds: {s['micro_acc_mean_across_runs']:.2f} +/- {s['micro_acc_std_across_runs']:.2f}")
