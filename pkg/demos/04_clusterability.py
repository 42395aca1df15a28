# %% [markdown]
# # Clusterability B and cosine similarity
#
# B measures how far a member's gradient strays from its cluster's mean
# gradient, relative to that mean. Clients drawn from one distribution give
# a small B. Pooling clients from different clusters gives a large one.

# %%
import itertools

import numpy as np

from clusterfl.clustering import m_step
from clusterfl.engine import config_from_dict, run_experiment
from clusterfl.metrics import clusterability_b, cosine_similarity_matrix
from clusterfl.model import gradient

doc = {
    "rounds": 10,
    "data": {"synthetic": {"n_clusters_true": 4, "clients_per_cluster": 10, "samples_per_client": 100}},
    "partition": {"kind": "synthetic"},
    "strategy": {"kind": "wecfl", "k_clusters": 4},
}
st = run_experiment(config_from_dict(doc)).states[0]
lam, a, P = st.weights(), st.assignment(), st.client_params()

models = m_step(P, a, lam, 4, previous=st.models())
for k in range(4):
    mem = np.flatnonzero(a == k)
    b = clusterability_b([gradient(models[k], st.spec, st.clients[i].train) for i in mem], lam[mem])
    print(f"cluster {k}: B = {b:.3f}")
pooled = m_step(P, np.zeros(len(P), int), lam, 1)[0]
print("all clients pooled: B =", round(clusterability_b([gradient(pooled, st.spec, c.train) for c in st.clients], lam), 3))

# %%
S = cosine_similarity_matrix(P)
intra = [S[i, j] for i, j in itertools.combinations(range(len(a)), 2) if a[i] == a[j]]
C = cosine_similarity_matrix(st.models())
print(f"intra-cluster client cosine {np.mean(intra):.4f}")
print(np.round(C, 3))
