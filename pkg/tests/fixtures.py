import os

import numpy as np

from covadj.data import make_dataset
from covadj.data_types import ClusterRecord

THIS_DIR = os.path.dirname(os.path.abspath(__file__))
TEST_CFG_PATH = os.path.join(THIS_DIR, "test_cfg.json")

# Monte Carlo checks run only when this is set, e.g.
# (.venv) pkg $ COVADJ_SLOW=1 python -m tests.runner
SLOW = bool(os.environ.get("COVADJ_SLOW"))


def random_trial(n_per_arm=10, size=1, p=3, seed=0, effect=0.0, cluster_sd=0.0):
    """Normal covariates and errors, y = 1 + effect*A + 0.5*sum_k k*x_k + b_i + e."""
    rng = np.random.default_rng(seed)
    assignment = np.r_[np.ones(n_per_arm, dtype=int), np.zeros(n_per_arm, dtype=int)]
    coef = 0.5 * np.arange(1, p + 1)
    clusters = []
    for i, a in enumerate(assignment):
        m = size if np.isscalar(size) else int(rng.integers(size[0], size[1] + 1))
        X = rng.normal(size=(m, p))
        y = 1 + effect * a + X @ coef + cluster_sd * rng.normal() + rng.normal(size=m)
        clusters.append(ClusterRecord(str(i + 1), int(a), y, X))
    return make_dataset(clusters)


def trial_from_arrays(y, A, X=None, groups=None):
    """Dataset from unit-level arrays; groups defaults to one unit per cluster."""
    y = np.asarray(y, dtype=float)
    X = np.zeros((len(y), 0)) if X is None else np.asarray(X, dtype=float).reshape(len(y), -1)
    groups = np.arange(len(y)) if groups is None else np.asarray(groups)
    A = np.asarray(A, dtype=int)
    clusters = []
    for g in dict.fromkeys(groups.tolist()):
        rows = groups == g
        clusters.append(ClusterRecord(str(g), int(A[rows][0]), y[rows], X[rows]))
    return make_dataset(clusters)
