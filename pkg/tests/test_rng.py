import math

import numpy as np
import pytest
from scipy.stats import binom, chisquare, kstest

from kimmel._rng import RandomStream


def test_streams_are_reproducible_and_distinct():
    a = RandomStream(7, 3).uniform(100)
    b = RandomStream(7, 3).uniform(100)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RandomStream(7, 4).uniform(100))
    assert not np.array_equal(a, RandomStream(8, 3).uniform(100))


def test_uniform_range_and_law():
    u = RandomStream(1, 0).uniform(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert kstest(u, "uniform").pvalue > 1e-4


def test_neighbouring_streams_uncorrelated():
    x = np.array([RandomStream(0, i).uniform(1)[0] for i in range(20_000)])
    assert kstest(x, "uniform").pvalue > 1e-4
    assert abs(np.corrcoef(x[:-1], x[1:])[0, 1]) < 4 / math.sqrt(x.size)


@pytest.mark.parametrize("n,p", [(5, 0.3), (32, 0.5), (40, 0.2), (1000, 0.01), (10**6, 0.37)])
def test_binomial_moments(n, p):
    k = RandomStream(2, n).binomial(n, p, 100_000)
    assert k.min() >= 0 and k.max() <= n
    mu, var = n * p, n * p * (1 - p)
    assert abs(k.mean() - mu) <= 5 * math.sqrt(var / k.size)
    assert abs(k.var() / var - 1) < 0.03


def test_binomial_law_moderate_n():
    n, p = 60, 0.3
    k = RandomStream(3, 0).binomial(n, p, 200_000)
    observed = np.bincount(k, minlength=n + 1)
    expected = binom.pmf(np.arange(n + 1), n, p) * k.size
    keep = expected >= 5
    obs = np.append(observed[keep], observed[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    exp *= obs.sum() / exp.sum()
    assert chisquare(obs, exp).pvalue > 1e-4


def test_binomial_edge_cases():
    s = RandomStream(0, 0)
    assert s.binomial(0, 0.5, 3).tolist() == [0, 0, 0]
    assert s.binomial(10, 0.0, 3).tolist() == [0, 0, 0]
    assert s.binomial(10, 1.0, 3).tolist() == [10, 10, 10]
