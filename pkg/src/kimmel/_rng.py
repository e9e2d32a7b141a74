"""Per-replicate random streams for the compiled simulation kernel.

xoshiro256** seeded through splitmix64 from ``(master_seed, replicate_id)``.
Streams are plain ``uint64[4]`` arrays so they can live inside numba code
and be owned by exactly one replicate.
"""

import math

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_RID_MUL = np.uint64(0xD1B54A32D192ED03)
_U30 = np.uint64(30)
_U27 = np.uint64(27)
_U31 = np.uint64(31)
_U11 = np.uint64(11)
_U17 = np.uint64(17)
_TWO53 = 1.0 / 9007199254740992.0

BINOMIAL_DIRECT = 32


@njit(cache=True)
def _splitmix(x):
    x = x + _GOLDEN
    z = x
    z = (z ^ (z >> _U30)) * _MIX1
    z = (z ^ (z >> _U27)) * _MIX2
    return x, z ^ (z >> _U31)


@njit(cache=True)
def seed_stream(master_seed, replicate_id):
    """Stream for one replicate; distinct ids give unrelated streams."""
    x, a = _splitmix(np.uint64(master_seed))
    x = a ^ (np.uint64(replicate_id) * _RID_MUL)
    state = np.empty(4, dtype=np.uint64)
    for i in range(4):
        x, state[i] = _splitmix(x)
    return state


@njit(cache=True, inline="always")
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@njit(cache=True)
def next_u64(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << _U17
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@njit(cache=True)
def uniform(s):
    """Uniform on [0, 1) with 53 random bits."""
    return float(next_u64(s) >> _U11) * _TWO53


@njit(cache=True)
def normal(s):
    # Marsaglia polar method; the second variate is discarded
    while True:
        u = 2.0 * uniform(s) - 1.0
        v = 2.0 * uniform(s) - 1.0
        r = u * u + v * v
        if 0.0 < r < 1.0:
            return u * math.sqrt(-2.0 * math.log(r) / r)


@njit(cache=True)
def gamma(s, shape):
    """Gamma(shape, 1) for shape >= 1 (Marsaglia-Tsang)."""
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = normal(s)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = uniform(s)
        if u < 1.0 - 0.0331 * x * x * x * x:
            return d * v
        if math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return d * v


@njit(cache=True)
def beta(s, a, b):
    x = gamma(s, a)
    y = gamma(s, b)
    return x / (x + y)


@njit(cache=True)
def binomial(s, n, p):
    """Exact Binomial(n, p).

    Large n is reduced by splitting at a Beta-distributed order statistic of
    n uniforms; at most BINOMIAL_DIRECT Bernoulli trials remain.
    """
    if n <= 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return n
    k = 0
    while n > BINOMIAL_DIRECT:
        a = 1 + n // 2
        b = n + 1 - a
        x = beta(s, float(a), float(b))
        if x >= p:
            n = a - 1
            p = p / x
        else:
            k += a
            n = b - 1
            p = (p - x) / (1.0 - x)
    for _ in range(n):
        if uniform(s) < p:
            k += 1
    return k


@njit(cache=True)
def stochastic_round(s, x):
    base = math.floor(x)
    if uniform(s) < x - base:
        base += 1.0
    return np.int64(base)


class RandomStream:
    """Caller-owned stream handle for the Python-level simulation API."""

    def __init__(self, master_seed: int = 0, replicate_id: int = 0):
        self.state = seed_stream(np.uint64(master_seed), np.uint64(replicate_id))

    def uniform(self, size: int) -> np.ndarray:
        return _uniform_array(self.state, size)

    def binomial(self, n: int, p: float, size: int) -> np.ndarray:
        return _binomial_array(self.state, n, p, size)


@njit(cache=True)
def _uniform_array(s, size):
    out = np.empty(size)
    for i in range(size):
        out[i] = uniform(s)
    return out


@njit(cache=True)
def _binomial_array(s, n, p, size):
    out = np.empty(size, dtype=np.int64)
    for i in range(size):
        out[i] = binomial(s, n, p)
    return out
