import numpy as np
import pytest

from msplogit.model import Cluster, ClusteredDataset, Theta


def make_dataset(k=3, n_i=4, p=2, q=1, seed=0, beta=None, psi=None):
    """Random small dataset; responses drawn from the model when beta/psi given,
    otherwise fair coin flips."""
    rng = np.random.default_rng(seed)
    clusters = []
    for _ in range(k):
        X = np.column_stack([np.ones(n_i), rng.normal(size=(n_i, p - 1))]) if p > 1 else np.ones((n_i, 1))
        Z = np.ones((n_i, 1)) if q == 1 else np.column_stack([np.ones(n_i), rng.normal(size=(n_i, q - 1))])
        if beta is None:
            y = rng.integers(0, 2, n_i).astype(float)
        else:
            from msplogit.model import psi_to_chol

            L = psi_to_chol(np.asarray(psi, dtype=float), q)
            u = L @ rng.standard_normal(q)
            eta = X @ np.asarray(beta, dtype=float) + Z @ u
            y = (rng.random(n_i) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        clusters.append(Cluster(y, X, Z))
    return ClusteredDataset(tuple(clusters))


def separation_dataset():
    """Every cluster perfectly classified by the slope column (q = 1)."""
    clusters = []
    for _ in range(6):
        x = np.array([-1.0, -1.0, 1.0, 1.0])
        X = np.column_stack([np.ones(4), x])
        clusters.append(Cluster((x > 0).astype(float), X, np.ones((4, 1))))
    return ClusteredDataset(tuple(clusters))


def degenerate_slope_dataset(seed=4, k=8, n_i=8):
    """Random intercept + slope design whose slope heterogeneity is zero.

    An unpenalized fit drives the second Cholesky diagonal to zero on
    this data (log l22 off to -infinity, exploding standard errors).
    """
    rng = np.random.default_rng(seed)
    clusters = []
    for _ in range(k):
        x = rng.normal(size=n_i)
        X = np.column_stack([np.ones(n_i), x])
        u1 = rng.normal()
        eta = 0.5 + u1 - 0.5 * x
        y = (rng.random(n_i) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
        clusters.append(Cluster(y, X, X.copy()))
    return ClusteredDataset(tuple(clusters))


@pytest.fixture(scope="session")
def culcita_reduced():
    from msplogit.datasets import culcita

    return culcita(drop_atypical=True)


@pytest.fixture(scope="session")
def culcita_full():
    from msplogit.datasets import culcita

    return culcita(drop_atypical=False)


@pytest.fixture(scope="session")
def reference_mspl_point():
    """The reference softly-penalized estimate on the reduced data."""
    return Theta(np.array([8.05, -6.90, -7.87, -9.64]), np.array([1.72]))
