"""Clustered federated learning simulator: weighted K-means over client parameters plus federated training."""

from .algorithms import (ClientState, ClusterState, FederationState, Strategy, TheoremViolation, build_federation,
                         run_round, descent_eta_bound, theorem_eta_bound)
from .clustering import e_step, init_centroids, m_step, objective_f
from .data import (Dataset, IdxFormatError, Partition, SyntheticSpec, dirichlet_partition, generate_synthetic,
                   load_idx, nclass_partition)
from .engine import ConfigError, ExperimentConfig, ExperimentResult, config_from_dict, run_experiment, sweep
from .metrics import RoundRecord, adjusted_rand_index, clusterability_b, macro_f1, micro_accuracy, objective_r
from .model import ModelSpec, SgdConfig, gradient, init_params, local_update, loss

__version__ = "0.1.0"
