import numpy as np
import pytest

from clusterfl.data import Dataset, SyntheticSpec, generate_synthetic


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def balanced_dataset(n_per_class=50, n_classes=10, n_features=3, seed=0):
    r = np.random.default_rng(seed)
    y = np.repeat(np.arange(n_classes), n_per_class)
    return Dataset(r.normal(size=(y.size, n_features)), y, n_classes)


@pytest.fixture
def tiny_task():
    return generate_synthetic(SyntheticSpec(n_clusters_true=2, clients_per_cluster=3, samples_per_client=60,
                                            n_features=4, n_classes=3, seed=7))


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
