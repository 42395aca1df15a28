# %% [markdown]
# # Cluster-wise non-IID partitions
#
# Two ways to carve a labelled dataset into clusters of clients: a two-level
# Dirichlet split, and an n-class split where each cluster owns a few classes
# and each client a subset of those.

# %%
import numpy as np

from clusterfl.data import Dataset, dirichlet_partition, nclass_partition

rng = np.random.default_rng(0)
y = np.repeat(np.arange(10), 200)
data = Dataset(rng.normal(size=(y.size, 5)), y, 10)


def show(part):
    for i, shard in enumerate(part.client_shards):
        h = np.bincount(data.labels[shard], minlength=10)
        print(f"client {i:2d} cluster {part.cluster_of_client[i]}  {h}")


# %% Dirichlet: alpha 0.1 across clusters, 10 within a cluster
show(dirichlet_partition(data, m=8, k_true=4, alpha_cluster=0.1, alpha_client=10.0, seed=1))

# %% (3,2)-class: every client row has exactly two nonzero counts
show(nclass_partition(data, m=8, k_true=4, n_cluster_classes=3, n_client_classes=2, seed=1))

# %% [markdown]
# Raising alpha_client makes clients inside a cluster look more alike.

# %%
for a in (0.1, 1.0, 10.0, 100.0):
    p = dirichlet_partition(data, 20, 4, 1.0, a, seed=3)
    h = np.array([np.bincount(data.labels[s], minlength=10) for s in p.client_shards], float)
    h /= h.sum(1, keepdims=True)
    t = np.array(p.cluster_of_client)
    l1 = [np.abs(h[i] - h[j]).sum() for i in range(20) for j in range(i + 1, 20) if t[i] == t[j]]
    print(f"alpha_client={a:6.1f}  mean intra-cluster L1 = {np.mean(l1):.3f}")
