import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metastab.chain import MarkovChain, ProbMeasure, build_chain

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def path_chain(n, rate=1.0):
    entries = {}
    for i in range(n - 1):
        entries[(i, i + 1)] = rate
        entries[(i + 1, i)] = rate
    return build_chain(n, entries)


def random_reversible(rng, n, density=0.5):
    """Conductance network with random weights; returns (chain, mu)."""
    mu = rng.uniform(0.2, 1.0, n)
    mu /= mu.sum()
    C = np.zeros((n, n))
    for i in range(n - 1):  # spanning path keeps it irreducible
        C[i, i + 1] = C[i + 1, i] = rng.uniform(0.1, 2.0)
    extra = np.triu(rng.random((n, n)) < density, 2)
    w = rng.uniform(0.1, 2.0, (n, n))
    C[extra] = w[extra]
    C = np.triu(C)
    C = C + C.T
    R = C / mu[:, None]
    np.fill_diagonal(R, 0.0)
    return MarkovChain(R), ProbMeasure(mu)


def random_chain(rng, n, density=0.4):
    """Irreducible, generally non-reversible chain."""
    R = rng.uniform(0.1, 2.0, (n, n)) * (rng.random((n, n)) < density)
    for i in range(n):
        R[i, (i + 1) % n] = rng.uniform(0.1, 2.0)
    np.fill_diagonal(R, 0.0)
    return MarkovChain(R)


@pytest.fixture
def two_state():
    return build_chain(2, {(0, 1): 1.0, (1, 0): 1.0})


@pytest.fixture
def path3():
    return path_chain(3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def mc_agree(estimate, exact, n_samples=10_000, k=3.0):
    """``estimate(n, stream) -> SampleStats`` agrees with ``exact`` within ``k`` errors.

    A marginal miss is retried once with ten times the samples on a fresh stream.
    """
    est = estimate(n_samples, 0)
    if abs(est.mean - exact) <= k * est.stderr:
        return True
    est = estimate(10 * n_samples, 1)
    return abs(est.mean - exact) <= k * est.stderr
