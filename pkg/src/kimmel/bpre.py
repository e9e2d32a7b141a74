"""Exact dynamics of the parasite count along a uniformly random cell line.

Along a random line, each generation flips a fair coin for the daughter
index ``a`` and every parasite then has ``Z_a`` children: a branching
process in a two-state i.i.d. environment. The functions here evolve its
law exactly on {0..K} (mass above K is carried as overflow), solve for the
quasistationary (Yaglom) law, and specialise the machinery to the total
parasite count, which is an ordinary Galton-Watson process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .model import (
    OffspringLaw,
    _build,
    classify_regime,
    marginal,
    summarize,
    total_offspring_law,
)
from .pmf import Pmf, convolution_power, truncated_convolve

DEFAULT_K = 400
SIM_K = 64
ENV_MAX = 22


class SolverError(RuntimeError):
    """Yaglom iteration failed to converge or was asked for an unsupported regime."""


class BracketError(RuntimeError):
    """Truncation left a survival bracket wider than requested."""


@dataclass(frozen=True, eq=False)
class YaglomResult:
    pmf: Pmf
    decay_ratio: float
    iterations: int
    residual: float
    converged: bool


class SurvivalBracket(NamedTuple):
    lower: float
    upper: float

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @property
    def mid(self) -> float:
        return 0.5 * (self.lower + self.upper)


class DecayFit(NamedTuple):
    rate: float
    polynomial_exponent: float
    fit_quality: float
    note: str


# ---------------------------------------------------------------------------
# one-step transition


@lru_cache(maxsize=32)
def _transition(law: OffspringLaw, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Row i: law of the next count given i parasites, averaged over the coin.

    Returns the (K+1, K+1) matrix and the per-row overflow mass.
    """
    T = np.zeros((K + 1, K + 1))
    row_over = np.zeros(K + 1)
    for a in (0, 1):
        base = marginal(law, a).with_bound(K)
        power = Pmf.delta(0, K)
        T[0] += 0.5 * power.mass
        for i in range(1, K + 1):
            # incremental i-th convolution power, identical to convolution_power(base, i, K)
            power = truncated_convolve(power, base, K)
            T[i] += 0.5 * power.mass
            row_over[i] += 0.5 * power.overflow
    T[np.abs(T) < 1e-300] = 0.0
    T.setflags(write=False)
    row_over.setflags(write=False)
    return T, row_over


def _as_vector(current: Pmf, K: int) -> tuple[np.ndarray, float]:
    pmf = current.with_bound(K)
    return np.array(pmf.mass), pmf.overflow


def bpre_step(current: Pmf, law: OffspringLaw, K: int = DEFAULT_K) -> Pmf:
    """Law of Z_{n+1} from the law of Z_n. Overflow stays overflow."""
    T, row_over = _transition(law, K)
    vec, over = _as_vector(current, K)
    nxt = vec @ T
    overflow = over + float(vec @ row_over)
    return Pmf(nxt, min(overflow, 1.0))


def _evolve(law: OffspringLaw, n: int, K: int, start: Pmf | None = None):
    """Yield (mass, overflow) for generations 0..n, starting from one parasite."""
    T, row_over = _transition(law, K)
    vec, over = _as_vector(start or Pmf.delta(1, K), K)
    yield vec, over
    for _ in range(n):
        over = over + float(vec @ row_over)
        vec = vec @ T
        yield vec, over


def bpre_distribution(law: OffspringLaw, n: int, K: int = DEFAULT_K) -> Pmf:
    """Law of Z_n from Z_0 = 1."""
    *_, (vec, over) = _evolve(law, n, K)
    return Pmf(vec, min(over, 1.0))


# ---------------------------------------------------------------------------
# survival


def _one_minus_pgf(pmf: Pmf, t):
    """1 - f(1 - t), computed without cancellation for small t."""
    t = np.asarray(t, dtype=np.float64)
    ks = np.arange(1, pmf.mass.size)
    with np.errstate(divide="ignore"):
        terms = -np.expm1(np.multiply.outer(np.log1p(-t), ks))
    return terms @ pmf.mass[1:]


def environment_sum_survival(law: OffspringLaw, n: int) -> float:
    """P(Z_n > 0) as the average of 1 - f_i(0) over all 2^n environment sequences."""
    if n > ENV_MAX:
        raise ValueError(f"environment enumeration is limited to n <= {ENV_MAX}")
    margs = (marginal(law, 0), marginal(law, 1))
    # t = 1 - s; start at s = 0 for every sequence, apply the last letter first
    t = np.ones(1)
    for _ in range(n):
        t = np.concatenate([_one_minus_pgf(margs[0], t), _one_minus_pgf(margs[1], t)])
    return math.fsum(t) / t.size


def survival_prob_exact(law: OffspringLaw, n: int, K: int = DEFAULT_K,
                        max_width: float | None = None,
                        cross_check: bool = True) -> SurvivalBracket:
    """Bracket on P(Z_n > 0).

    The lower end counts overflowed mass as dead, the upper end as alive.
    For n <= 12 the bracket is checked against the environment sum.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    pmf = bpre_distribution(law, n, K)
    lower = pmf.positive_mass()
    bracket = SurvivalBracket(lower, min(lower + pmf.overflow, 1.0))
    if max_width is not None and bracket.width > max_width:
        raise BracketError(f"survival bracket width {bracket.width:.3g} exceeds "
                           f"{max_width:.3g} at n={n}; raise K above {K}")
    if cross_check and n <= 12:
        exact = environment_sum_survival(law, n)
        slack = 1e-12 + 1e-9 * exact
        if not bracket.lower - slack <= exact <= bracket.upper + slack:
            raise AssertionError(f"DP bracket {bracket} disagrees with environment sum {exact}")
    return bracket


def survival_curve(law: OffspringLaw, n: int, K: int = DEFAULT_K,
                   tight: bool = False) -> list[SurvivalBracket]:
    """Brackets on P(Z_g > 0) for g = 0..n in one pass.

    With ``tight`` the lower end comes from the chain whose count is capped
    at K instead of being dropped on overflow. Survival is nondecreasing in
    the starting count, so the capped chain still survives less often than
    the true one, and it loses far less mass when lines grow past K.
    """
    out = [SurvivalBracket(math.fsum(vec[1:]), min(math.fsum(vec[1:]) + over, 1.0))
           for vec, over in _evolve(law, n, K)]
    if not tight:
        return out
    T, row_over = _transition(law, K)
    capped = np.array(T)
    capped[:, K] += row_over
    vec = Pmf.delta(1, K).mass.copy()
    for g in range(1, n + 1):
        vec = vec @ capped
        lo = max(out[g].lower, min(math.fsum(vec[1:]), out[g].upper))
        out[g] = SurvivalBracket(lo, out[g].upper)
    return out


def conditioned_pmf(law: OffspringLaw, n: int, K: int = DEFAULT_K) -> Pmf:
    """Law of Z_n given Z_n > 0, on {1..K}.

    The returned overflow is the conditional mass above K.
    """
    pmf = bpre_distribution(law, n, K)
    alive = pmf.positive_mass()
    if alive <= 0.0:
        raise BracketError(f"survival lower bound is 0 at n={n}; cannot condition")
    norm = alive + pmf.overflow
    mass = np.array(pmf.mass)
    mass[0] = 0.0
    return Pmf(mass / norm, pmf.overflow / norm)


# ---------------------------------------------------------------------------
# quasistationary law


def _check_strongly_subcritical(law: OffspringLaw):
    m0, m1 = law.mean(0), law.mean(1)
    if m0 <= 0 or m1 <= 0:
        raise SolverError("both mean offspring numbers must be positive")
    regime = classify_regime(m0, m1)
    if regime.label not in ("D1", "D2", "D3"):
        raise SolverError(
            f"regime {regime} is not strongly subcritical along a cell line "
            "(needs m0*m1 < 1 and m0 ln m0 + m1 ln m1 < 0); no quasistationary "
            "limit of the form solved here. Use survival_decay_fit for diagnostics.")


def functional_eq_residual(law: OffspringLaw, candidate: Pmf,
                           sample_points: Sequence[float] | None = None,
                           with_bound: bool = False):
    """max_s |(G(f0(s)) + G(f1(s)))/2 - m G(s) - (1 - m)| for the candidate's G.

    With ``with_bound`` also return the truncation bound: the overflow mass
    can shift each G value by at most ``candidate.overflow``.
    """
    if candidate.mass[0] != 0.0:
        raise ValueError("candidate must put no mass at 0")
    if sample_points is None:
        sample_points = np.linspace(0.0, 1.0, 21)
    s = np.asarray(sample_points, dtype=np.float64)
    m = 0.5 * (law.mean(0) + law.mean(1))
    f0 = marginal(law, 0).pgf(s)
    f1 = marginal(law, 1).pgf(s)
    G = candidate.pgf
    res = float(np.max(np.abs(0.5 * (G(f0) + G(f1)) - m * G(s) - (1.0 - m))))
    if with_bound:
        return res, (1.0 + m) * candidate.overflow
    return res


def yaglom_power_iteration(law: OffspringLaw, K: int = DEFAULT_K, tol: float = 1e-12,
                           max_iter: int = 100_000, start: Pmf | None = None,
                           check_regime: bool = True) -> YaglomResult:
    """Quasistationary law of the cell-line process by conditioned evolution.

    Repeats "one generation, drop the dead, renormalise" from ``start``
    (default: one parasite) until successive laws differ by less than ``tol``
    in L1.
    """
    if check_regime:
        _check_strongly_subcritical(law)
    T, _ = _transition(law, K)
    Tpos = np.ascontiguousarray(T[1:, 1:])
    if start is None:
        start = Pmf.delta(1, K)
    v = np.array(start.with_bound(K).mass[1:])
    if v.sum() <= 0:
        raise ValueError("start law must put mass on positive counts")
    v /= v.sum()
    decay = float("nan")
    for it in range(1, max_iter + 1):
        w = v @ Tpos
        decay = float(w.sum())
        if decay <= 0:
            raise SolverError("conditioned evolution died out: no surviving mass")
        w /= decay
        change = float(np.abs(w - v).sum())
        v = w
        if change < tol:
            break
    else:
        raise SolverError(f"no convergence in {max_iter} iterations (last L1 change {change:.3g})")
    pmf = Pmf(np.concatenate([[0.0], v]))
    residual = functional_eq_residual(law, pmf)
    return YaglomResult(pmf, decay, it, residual, True)


def linear_fractional_root(b: float, p: float) -> float:
    """Root larger than 1 of f(s) = s for the linear fractional marginal."""
    if not 0.0 < p < 1.0 or not 0.0 < b < (1.0 - p) ** 2:
        raise ValueError("need p in (0, 1) and b in (0, (1-p)^2)")
    q0 = (1.0 - b - p) / (1.0 - p)
    # (1 - p s) s = q0 (1 - p s) + b s  <=>  p s^2 + (b - 1 - q0 p) s + q0 = 0
    A, B, C = p, b - 1.0 - q0 * p, q0
    disc = B * B - 4.0 * A * C
    if disc < 0:
        raise ValueError("no real fixed point")
    # larger root without cancellation (B < 0 here)
    s0 = (-B + math.sqrt(disc)) / (2.0 * A)
    if not s0 > 1.0:
        raise ValueError("no fixed point above 1")
    return s0


def linear_fractional_yaglom(b: float, p: float, kmax: int = DEFAULT_K) -> Pmf:
    """P(Y = k) = (s0 - 1) / s0^k on {1..kmax}; the geometric tail goes to overflow."""
    s0 = linear_fractional_root(b, p)
    ks = np.arange(kmax + 1, dtype=np.float64)
    mass = (s0 - 1.0) * s0 ** (-ks)
    mass[0] = 0.0
    return Pmf(mass, s0 ** (-float(kmax)))


def size_biased(pmf: Pmf, overflow_tol: float = 1e-15) -> Pmf:
    """q(k) = k p(k) / sum_j j p(j)."""
    if pmf.overflow > overflow_tol:
        raise ValueError(f"size-biasing needs a law without overflow (got {pmf.overflow:.3g})")
    w = np.arange(pmf.mass.size) * pmf.mass
    total = w.sum()
    if total <= 0:
        raise ValueError("size-biasing needs a positive mean")
    return Pmf(w / total)


# ---------------------------------------------------------------------------
# the total parasite count


@lru_cache(maxsize=64)
def _degenerate_law(total_key: tuple) -> OffspringLaw:
    return _build([(k, k, p) for k, p in total_key], "table")


def degenerate_law(total: Pmf) -> OffspringLaw:
    """Two-environment law whose environments both reproduce like ``total``."""
    if total.overflow > 0:
        raise ValueError("total law must have no overflow")
    return _degenerate_law(tuple((k, float(p)) for k, p in enumerate(total.mass) if p > 0))


def bgw_yaglom(total: Pmf, K: int = DEFAULT_K, tol: float = 1e-12,
               max_iter: int = 100_000) -> YaglomResult:
    """Quasistationary law of a subcritical Galton-Watson process."""
    mean = total.mean()
    if mean >= 1.0:
        raise SolverError(f"Galton-Watson law has mean {mean:.6g} >= 1; no Yaglom limit")
    law = degenerate_law(total)
    return yaglom_power_iteration(law, K, tol, max_iter, check_regime=False)


def bgw_extinction_by(total: Pmf, n: int) -> np.ndarray:
    """q[r] = P(extinct by generation r | one ancestor), r = 0..n."""
    q = np.zeros(n + 1)
    for r in range(1, n + 1):
        q[r] = float(total.pgf(q[r - 1]))
    return q


def bgw_survival(total: Pmf, n: int) -> float:
    """P(Z_n > 0) for the Galton-Watson process, computed without cancellation."""
    t = np.ones(1)
    for _ in range(n):
        t = _one_minus_pgf(total, t)
    return float(t[0])


def bgw_distribution(total: Pmf, n: int, K: int = DEFAULT_K) -> Pmf:
    return bpre_distribution(degenerate_law(total), n, K)


def bgw_conditioned_future(total: Pmf, n: int, k_ahead: int, K: int = DEFAULT_K) -> Pmf:
    """Law of the count at generation n given survival at generation n + k_ahead.

    Each state j is weighted by 1 - q^j, q the extinction probability within
    ``k_ahead`` generations. Overflowed mass is weighted as surviving.
    """
    pmf = bgw_distribution(total, n, K)
    q = bgw_extinction_by(total, k_ahead)[-1]
    j = np.arange(pmf.mass.size)
    weight = -np.expm1(j * math.log(q)) if q > 0 else (j > 0).astype(float)
    w = pmf.mass * weight
    norm = w.sum() + pmf.overflow
    if w.sum() <= 0:
        raise BracketError("no surviving mass to condition on")
    return Pmf(w / norm, pmf.overflow / norm)


# ---------------------------------------------------------------------------
# decay fits


def survival_decay_fit(law: OffspringLaw, n_range: Sequence[int], K: int = DEFAULT_K,
                       max_width: float = 1e-9) -> DecayFit:
    """Fit ln P(Z_n > 0) = ln c + n ln(rate) + e ln(n) by least squares."""
    ns = np.asarray(list(n_range), dtype=np.int64)
    if ns.size < 4:
        raise ValueError("need at least 4 generations to fit")
    if np.any(np.diff(ns) <= 0) or ns[0] < 1:
        raise ValueError("n_range must be increasing and positive")
    curve = survival_curve(law, int(ns[-1]), K, tight=True)
    vals = []
    for n in ns:
        br = curve[n]
        if br.width <= max_width * max(br.upper, 1e-300):
            vals.append(br.mid)
        elif n <= ENV_MAX:
            # truncation too coarse here; enumerate the environments instead
            vals.append(environment_sum_survival(law, int(n)))
        else:
            raise BracketError(f"survival bracket at n={n} too wide ({br}); raise K above {K}")
    y = np.log(vals)
    X = np.column_stack([np.ones(ns.size), ns, np.log(ns)])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    regime = classify_regime(law.mean(0), law.mean(1))
    note = ""
    if regime.label == "D4":
        note = ("D4: asymptotic regime per weak/intermediate subcriticality; "
                "exploratory fit, no theorem target")
    return DecayFit(float(math.exp(coef[1])), float(coef[2]), r2, note)


# ---------------------------------------------------------------------------
# Monte Carlo lines (independent of the exact dynamics above)


def bpre_sample_lines(law: OffspringLaw, n: int, n_paths: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Simulate ``n_paths`` independent lines; returns counts of shape (n_paths, n+1)."""
    margs = [marginal(law, a) for a in (0, 1)]
    probs = [m.mass / m.mass.sum() for m in margs]
    values = [np.arange(m.mass.size) for m in margs]
    out = np.zeros((n_paths, n + 1), dtype=np.int64)
    z = np.ones(n_paths, dtype=np.int64)
    out[:, 0] = z
    for g in range(1, n + 1):
        env = rng.integers(0, 2, size=n_paths)
        nxt = np.zeros(n_paths, dtype=np.int64)
        for a in (0, 1):
            idx = np.flatnonzero((env == a) & (z > 0))
            if idx.size:
                counts = rng.multinomial(z[idx], probs[a])
                nxt[idx] = counts @ values[a]
        z = nxt
        out[:, g] = z
    return out


def bpre_sample_line(law: OffspringLaw, n: int, rng: np.random.Generator) -> np.ndarray:
    """One path Z_0..Z_n of the cell-line process."""
    return bpre_sample_lines(law, n, 1, rng)[0]


def expected_counts(law: OffspringLaw, n: int) -> float:
    """E(Z_n) = m^n."""
    return (0.5 * (law.mean(0) + law.mean(1))) ** n


__all__ = [
    "Pmf", "YaglomResult", "SurvivalBracket", "DecayFit", "SolverError", "BracketError",
    "convolution_power", "bpre_step", "bpre_distribution", "survival_prob_exact",
    "survival_curve", "environment_sum_survival", "conditioned_pmf",
    "yaglom_power_iteration", "functional_eq_residual", "linear_fractional_yaglom",
    "linear_fractional_root", "size_biased", "bgw_yaglom", "bgw_conditioned_future",
    "bgw_extinction_by", "bgw_survival", "bgw_distribution", "degenerate_law",
    "survival_decay_fit", "bpre_sample_line", "bpre_sample_lines", "expected_counts",
    "summarize", "total_offspring_law",
]
