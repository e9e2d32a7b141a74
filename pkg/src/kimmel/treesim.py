"""Monte Carlo simulation of the tree of contaminated cells.

Every replicate starts from one cell holding one parasite. Each parasite of
a dividing cell draws its children in the two daughters from the joint
offspring law, independently of every other parasite. The heavy lifting is
done by a compiled kernel (``_kernel``); this module owns configuration,
conditioning, batching and the observables built on top of it.

Conditioning
------------
``survive_at_horizon``, ``survive_with_margin`` (alive ``margin`` generations
after the horizon) and ``survive_forever`` can be realized two ways:

* ``rejection``: simulate unconditioned replicates and keep the survivors.
  Survival past the horizon is decided by one Bernoulli draw with the exact
  probability ``1 - q^Z`` given the horizon population ``Z``.
* ``spine``: sample directly from the conditioned law. One parasite per
  generation carries the surviving line; its siblings are split into lines
  that must die out in time and lines that are left free.

Both are exact. The spine sampler never rejects, which matters when survival
is rare (subcritical total populations).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numba
import numpy as np

from . import _kernel
from ._rng import RandomStream
from .bpre import _one_minus_pgf, survival_curve
from .model import OffspringLaw, summarize, total_offspring_law
from .stats import EnsembleAccumulator, EnsembleStats, mean_and_se, summarize_values

if numba.config.THREADING_LAYER == "default":
    # TBB is often present but too old; skip straight to a portable layer
    numba.config.THREADING_LAYER = "workqueue"

CONDITIONINGS = ("none", "survive_at_horizon", "survive_with_margin", "survive_forever")
SAMPLERS = ("rejection", "spine")
MIN_ACCEPTANCE = 1e-4
N_TOP = 8


class InfeasibleConditioning(RuntimeError):
    """The conditioning event is too rare for the chosen sampler, or impossible."""


class BudgetExhausted(RuntimeError):
    """The replicate budget ran out before enough replicates were accepted."""


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines an ensemble, including its random streams.

    ``replicates`` is the number of accepted replicates requested; under
    rejection more are simulated. ``margin`` is only read by
    ``survive_with_margin``.
    """

    law: OffspringLaw
    horizon: int
    replicates: int = 1000
    master_seed: int = 0
    conditioning: str = "none"
    margin: int = 6
    sampler: str = "rejection"
    k_top: int = 64
    cell_cap: int = 2**30
    tag_from: int | None = None
    ancestor_depth: tuple[int, int] | None = None
    crossover: int = 16
    batch_size: int = 1024
    max_attempts: int | None = None
    max_cells: int = 1 << 24

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.replicates < 1:
            raise ValueError("replicates must be at least 1")
        if self.conditioning not in CONDITIONINGS:
            raise ValueError(f"conditioning must be one of {CONDITIONINGS}")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}")
        if self.conditioning == "survive_with_margin" and self.margin < 0:
            raise ValueError("margin must be nonnegative")
        if self.k_top < 1 or self.cell_cap <= self.k_top:
            raise ValueError("need 1 <= k_top < cell_cap")
        if self.cell_cap > 2**40:
            raise ValueError("cell_cap above 2^40 risks int64 overflow in the kernel")
        if self.tag_from is not None and not 0 <= self.tag_from <= self.horizon:
            raise ValueError("tag_from must lie in [0, horizon]")
        if self.ancestor_depth is not None:
            n0, p = self.ancestor_depth
            if n0 < 0 or p < 0 or n0 + p > self.horizon:
                raise ValueError("ancestor_depth (n0, p) needs 0 <= n0 and n0 + p <= horizon")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")
        if self.batch_size < 1 or self.crossover < 0:
            raise ValueError("batch_size must be positive and crossover nonnegative")

    @property
    def target_generation(self) -> float:
        """Generation at which survival is required (inf for survive_forever)."""
        return {
            "none": 0,
            "survive_at_horizon": self.horizon,
            "survive_with_margin": self.horizon + self.margin,
            "survive_forever": math.inf,
        }[self.conditioning]

    def as_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "law"}
        d["law"] = {"family": self.law.family_tag,
                    "table": [[k0, k1, p] for (k0, k1), p in self.law.support]}
        if d["ancestor_depth"] is not None:
            d["ancestor_depth"] = list(d["ancestor_depth"])
        return d


# -- tables handed to the kernel ---------------------------------------------


def _alias(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Walker/Vose alias table for one probability row."""
    n = p.size
    prob = np.zeros(n)
    idx = np.arange(n, dtype=np.int64)
    scaled = p * n / p.sum()
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s, l = small.pop(), large.pop()
        prob[s] = scaled[s]
        idx[s] = l
        scaled[l] -= 1.0 - scaled[s]
        (small if scaled[l] < 1.0 else large).append(l)
    for i in small + large:
        prob[i] = 1.0
    return prob, idx


def _law_rows(rows: np.ndarray):
    R, S = rows.shape
    aprob = np.zeros((R, S))
    aidx = np.zeros((R, S), dtype=np.int64)
    last = np.zeros(R, dtype=np.int64)
    for r in range(R):
        aprob[r], aidx[r] = _alias(rows[r])
        last[r] = np.nonzero(rows[r] > 0)[0][-1]
    return aprob, aidx, last


@dataclass(frozen=True)
class _Tables:
    k0s: np.ndarray
    k1s: np.ndarray
    lawp: np.ndarray
    aprob: np.ndarray
    aidx: np.ndarray
    last_pos: np.ndarray
    law_row: np.ndarray
    spine_cdf: np.ndarray
    spine_q: np.ndarray
    spine_on: bool
    accept_mode: int
    accept_q: float
    acceptance: float


def _survival_by(total, n: int) -> np.ndarray:
    """t[r] = P(a single parasite has descendants r generations later), r = 0..n."""
    t = np.ones(n + 1)
    for r in range(1, n + 1):
        t[r] = float(_one_minus_pgf(total, np.array([t[r - 1]]))[0])
    return t


@lru_cache(maxsize=64)
def _tables(law: OffspringLaw, horizon: int, conditioning: str, margin: int,
            sampler: str) -> _Tables:
    k0s = np.asarray(law.k0, dtype=np.int64)
    k1s = np.asarray(law.k1, dtype=np.int64)
    k = k0s + k1s
    base = np.asarray(law.prob, dtype=np.float64)
    total = total_offspring_law(law)
    S = base.size
    ext = summarize(law).bgw_extinction

    # survival to the target generation, seen from generation g: t_of(r) with r = N - g
    if conditioning == "survive_forever":
        surv_inf = 1.0 - ext

        def t_of(r):
            return surv_inf

        acceptance = surv_inf
    elif conditioning == "none":
        acceptance = 1.0
        t_of = None
    else:
        N = horizon + (margin if conditioning == "survive_with_margin" else 0)
        t = _survival_by(total, N)

        def t_of(r):
            return float(t[r])

        acceptance = float(t[N])

    rows = [base]
    law_row = np.zeros((3, horizon), dtype=np.int64)
    spine_cdf = np.ones((horizon, S))
    spine_q = np.zeros(horizon)
    spine_on = sampler == "spine" and conditioning != "none"
    if spine_on:
        if acceptance <= 0.0:
            raise InfeasibleConditioning("the conditioning event has probability zero")
        N = math.inf if conditioning == "survive_forever" else horizon + (
            margin if conditioning == "survive_with_margin" else 0)
        for g in range(horizon):
            r = N - g
            t_next, t_here = t_of(r - 1), t_of(r)
            q_next, q_here = 1.0 - t_next, 1.0 - t_here
            # survival of at least one of k children: 1 - q_next^k
            if q_next <= 0.0:
                alive = (k > 0).astype(np.float64)
                doomed = np.where(k == 0, base, 0.0)
            else:
                lq = math.log1p(-t_next)
                alive = -np.expm1(k * lq)
                doomed = base * np.exp(k * lq)
            w = base * alive
            spine_cdf[g] = np.cumsum(w)
            spine_q[g] = q_next
            if q_here > 0.0 and doomed.sum() > 0:
                rows.append(doomed / doomed.sum())
                law_row[_kernel.DOOMED, g] = len(rows) - 1
    lawp = np.vstack(rows)
    aprob, aidx, last = _law_rows(lawp)

    accept_mode, accept_q = 0, 0.0
    if conditioning != "none" and not spine_on:
        if conditioning == "survive_at_horizon":
            accept_mode = 1
        else:
            accept_mode = 2
            accept_q = ext if conditioning == "survive_forever" else 1.0 - t_of(margin)
    return _Tables(k0s, k1s, lawp, aprob, aidx, last, law_row, spine_cdf, spine_q,
                   spine_on, accept_mode, accept_q, acceptance)


def exact_acceptance(config: SimConfig) -> float:
    """Probability of the conditioning event (1 when unconditioned)."""
    return _tables(config.law, config.horizon, config.conditioning, config.margin,
                   config.sampler).acceptance


# -- generation state and single steps ---------------------------------------


@dataclass(frozen=True, eq=False)
class GenerationState:
    """Contaminated cells of one generation.

    Cell ``c`` holds ``count[c]`` parasites and descends from cell
    ``parent[c]`` of the previous generation. Its parasites are described by
    the entries ``entry_start[c]:entry_start[c + 1]``: each entry is a tag
    with its parasite count (tag 0 before tagging starts, -1 once a cell
    saturated).
    """

    generation: int
    count: np.ndarray
    parent: np.ndarray
    saturated: np.ndarray
    entry_start: np.ndarray
    entry_tag: np.ndarray
    entry_class: np.ndarray
    entry_count: np.ndarray

    @classmethod
    def initial(cls) -> "GenerationState":
        one = np.ones(1, dtype=np.int64)
        return cls(0, one, np.full(1, -1, dtype=np.int64), np.zeros(1, dtype=np.bool_),
                   np.array([0, 1], dtype=np.int64), np.zeros(1, dtype=np.int64),
                   np.zeros(1, dtype=np.int8), one.copy())

    @property
    def n_cells(self) -> int:
        return int(self.count.size)

    def tags(self, c: int) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in range(self.entry_start[c], self.entry_start[c + 1]):
            t = int(self.entry_tag[e])
            out[t] = out.get(t, 0) + int(self.entry_count[e])
        return out

    def with_tags(self) -> "GenerationState":
        """Give every parasite of every unsaturated cell its own tag."""
        es, et, ec, en = _kernel.expand_tags(self.count, self.saturated, self.entry_start,
                                             self.entry_tag, self.entry_class, self.entry_count)
        return replace(self, entry_start=es, entry_tag=et, entry_class=ec, entry_count=en)


def step(state: GenerationState, law: OffspringLaw, config: SimConfig | None,
         stream: RandomStream) -> GenerationState:
    """Divide every cell of ``state`` once (unconditioned dynamics)."""
    tb = _tables(law, 1, "none", 0, "rejection")
    m0, m1 = law.mean(0), law.mean(1)
    cap = config.cell_cap if config is not None else 2**30
    crossover = config.crossover if config is not None else 16
    zeros = np.zeros(state.n_cells, dtype=np.int64)
    (cnt, sat, _, _, parent, es, et, ec, en, _) = _kernel.advance(
        stream.state, 0, state.count, state.saturated, zeros, zeros, state.entry_start,
        state.entry_tag, state.entry_class, state.entry_count, tb.k0s, tb.k1s, tb.lawp,
        tb.aprob, tb.aidx, tb.last_pos, tb.law_row, tb.spine_cdf, tb.spine_q, m0, m1,
        cap, crossover)
    return GenerationState(state.generation + 1, cnt, parent, sat, es, et, ec, en)


def sample_split(law: OffspringLaw, x: int, n: int, stream: RandomStream,
                 crossover: int = 16) -> np.ndarray:
    """``n`` draws of the daughter counts (z0, z1) of a cell holding ``x`` parasites."""
    tb = _tables(law, 1, "none", 0, "rejection")
    return _kernel.allocate_many(stream.state, x, n, tb.k0s, tb.k1s, tb.lawp, tb.aprob,
                                 tb.aidx, tb.last_pos, crossover)


# -- replicates ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ReplicateResult:
    """Observables of one replicate, indexed by generation 0..horizon.

    ``f_histogram[g, k - 1]`` counts cells holding k parasites for
    k = 1..k_top; the last column counts cells holding more.
    """

    replicate_id: int
    horizon: int
    k_top: int
    accepted: bool
    n_contaminated: np.ndarray
    total_parasites: np.ndarray
    total_saturated: np.ndarray
    f_histogram: np.ndarray
    leaves_cumulative: np.ndarray
    max_cell_count: np.ndarray
    extinction_generation: int | None
    ancestor_histogram: np.ndarray | None = None
    multiplicity_histogram: np.ndarray | None = None
    multiplicity_excluded: int = 0
    n_top: int = N_TOP

    @property
    def recovery_ratio(self) -> float:
        return float(self.n_contaminated[self.horizon]) / 2.0**self.horizon

    def as_dict(self) -> dict:
        d = {
            "replicate_id": self.replicate_id,
            "horizon": self.horizon,
            "k_top": self.k_top,
            "accepted": self.accepted,
            "n_contaminated": self.n_contaminated.tolist(),
            "total_parasites": self.total_parasites.tolist(),
            "total_saturated": self.total_saturated.tolist(),
            "f_histogram": self.f_histogram.tolist(),
            "leaves_cumulative": self.leaves_cumulative.tolist(),
            "max_cell_count": self.max_cell_count.tolist(),
            "extinction_generation": self.extinction_generation,
            "recovery_ratio": self.recovery_ratio,
        }
        if self.ancestor_histogram is not None:
            d["ancestor_histogram"] = self.ancestor_histogram.tolist()
        if self.multiplicity_histogram is not None:
            d["multiplicity_histogram"] = self.multiplicity_histogram.tolist()
            d["multiplicity_excluded"] = self.multiplicity_excluded
        return d

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True) + "\n"


def _batch(config: SimConfig, tb: _Tables, first_id: int, count: int):
    n0, p = config.ancestor_depth if config.ancestor_depth is not None else (-1, 0)
    tag_from = -1 if config.tag_from is None else config.tag_from
    out = _kernel.simulate_batch(
        np.int64(first_id), count, np.uint64(config.master_seed), config.horizon,
        tb.k0s, tb.k1s, tb.lawp, tb.aprob, tb.aidx, tb.last_pos, tb.law_row,
        tb.spine_cdf, tb.spine_q, tb.spine_on, config.law.mean(0), config.law.mean(1),
        np.int64(config.cell_cap), config.crossover, config.k_top, n0, p, tag_from, N_TOP,
        tb.accept_mode, tb.accept_q, np.int64(config.max_cells))
    if out[-1].any():
        bad = first_id + int(np.argmax(out[-1]))
        raise MemoryError(f"replicate {bad} exceeded max_cells={config.max_cells}")
    nc = out[0]
    # #G*_g / 2^g can only decrease along a replicate
    if np.any(nc[:, 1:] > 2 * nc[:, :-1]):
        raise AssertionError("contaminated-cell count more than doubled in one generation")
    if np.any(out[5].sum(axis=2, dtype=np.int64) != nc):
        raise AssertionError("F histogram does not sum to the contaminated-cell count")
    return out


def _tables_for(config: SimConfig) -> _Tables:
    return _tables(config.law, config.horizon, config.conditioning, config.margin,
                   config.sampler)


def run_replicate(config: SimConfig, replicate_id: int) -> ReplicateResult:
    """Simulate replicate ``replicate_id``; its stream depends only on (seed, id)."""
    tb = _tables_for(config)
    (nc, zt, zsat, leaves, maxc, hist, anc, mult, acc, ext, excl, _) = _batch(
        config, tb, replicate_id, 1)
    return ReplicateResult(
        replicate_id=replicate_id, horizon=config.horizon, k_top=config.k_top,
        accepted=bool(acc[0]), n_contaminated=nc[0], total_parasites=zt[0],
        total_saturated=zsat[0], f_histogram=hist[0].astype(np.int64),
        leaves_cumulative=leaves[0], max_cell_count=maxc[0],
        extinction_generation=None if ext[0] < 0 else int(ext[0]),
        ancestor_histogram=anc[0] if config.ancestor_depth is not None else None,
        multiplicity_histogram=mult[0].astype(np.int64) if config.tag_from is not None else None,
        multiplicity_excluded=int(excl[0]),
    )


def run_ensemble(config: SimConfig, threads: int | None = None) -> EnsembleStats:
    """Simulate until ``config.replicates`` replicates are accepted.

    Replicate ids are tried in fixed-size batches; the first ``replicates``
    accepted ids are kept. Results depend on nothing but the config.
    """
    if threads is not None:
        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    tb = _tables_for(config)
    if config.conditioning != "none" and tb.acceptance <= 0.0:
        raise InfeasibleConditioning(
            f"{config.conditioning}: the population dies out almost surely")
    if not tb.spine_on and tb.acceptance < MIN_ACCEPTANCE:
        raise InfeasibleConditioning(
            f"acceptance probability {tb.acceptance:.3g} is below {MIN_ACCEPTANCE:g}; "
            "use the spine sampler, a shorter horizon or a smaller margin")
    budget = config.max_attempts
    if budget is None:
        budget = int(math.ceil(2 * config.replicates / tb.acceptance)) + 4 * config.batch_size
    acc = EnsembleAccumulator(config.horizon, config.k_top, N_TOP,
                              ancestors=config.ancestor_depth is not None,
                              tagged=config.tag_from is not None)
    attempted = kept = 0
    first = 0
    while kept < config.replicates:
        if first >= budget:
            raise BudgetExhausted(
                f"only {kept} of {config.replicates} replicates accepted after {first} attempts")
        count = min(config.batch_size, budget - first)
        (nc, zt, zsat, leaves, maxc, hist, anc, mult, ok, ext, excl, _) = _batch(
            config, tb, first, count)
        idx = np.nonzero(ok)[0][: config.replicates - kept]
        attempted = first + (count if kept + idx.size < config.replicates else int(idx[-1]) + 1)
        acc.add(first + idx, nc[idx], zt[idx], zsat[idx], leaves[idx], maxc[idx], hist[idx],
                ext[idx], anc=anc[idx], mult=mult[idx], excluded=excl[idx])
        kept += idx.size
        first += count
    report_rate = tb.acceptance if config.conditioning != "none" else 1.0
    return acc.finish(attempted, exact_acceptance=report_rate, config=config.as_dict())


# -- observables --------------------------------------------------------------


def proportions(result, g: int, k_top: int | None = None) -> np.ndarray:
    """F_k(g) for k = 1..k_top plus a > k_top bucket.

    For an ensemble this is the mean of the replicate proportions over the
    replicates alive at ``g``.
    """
    if isinstance(result, EnsembleStats):
        f = result.f_mean(g)
        return f if k_top is None else _rebucket(f, k_top)
    n = int(result.n_contaminated[g])
    if n == 0:
        raise ValueError(f"generation {g} has no contaminated cell")
    f = result.f_histogram[g] / n
    return f if k_top is None else _rebucket(f, k_top)


def _rebucket(f: np.ndarray, k_top: int) -> np.ndarray:
    if k_top >= f.size - 1:
        if k_top > f.size - 1:
            raise ValueError("k_top exceeds the tracked range")
        return f
    out = np.empty(k_top + 1)
    out[:k_top] = f[:k_top]
    out[k_top] = f[k_top:].sum()
    return out


def ancestor_proportions(result, k_top: int | None = None) -> np.ndarray:
    """F_k(n0, n0 + p): cells of generation n0 + p by their ancestor's count at n0."""
    if isinstance(result, EnsembleStats):
        f = result.ancestor_mean()
    else:
        if result.ancestor_histogram is None:
            raise ValueError("ancestor tracking was not configured")
        tot = result.ancestor_histogram.sum()
        if tot == 0:
            raise ValueError("generation n0 + p has no contaminated cell")
        f = result.ancestor_histogram / tot
    return f if k_top is None else _rebucket(f, k_top)


def multiplicity_stats(result, K_anc: int) -> tuple[np.ndarray, int]:
    """Histogram of N (distinct tagged ancestors, 1..8 and > 8) over horizon cells
    whose ancestor held at most ``K_anc`` parasites at the tagging generation,
    and the number of saturated cells left out."""
    if isinstance(result, EnsembleStats):
        hist, excluded = result.multiplicity_pooled, result.multiplicity_excluded
    else:
        hist, excluded = result.multiplicity_histogram, result.multiplicity_excluded
    if hist is None:
        raise ValueError("tagging was not configured")
    return hist[: min(K_anc, hist.shape[0] - 1)].sum(axis=0), int(excluded)


def heavy_cell_mass(result, g: int, K: int) -> float:
    """Fraction of the parasites of generation ``g`` held by cells with more than K."""
    if isinstance(result, EnsembleStats):
        return result.heavy_cell_mass(g, K)
    if K > result.k_top:
        raise ValueError(f"K={K} exceeds the tracked k_top={result.k_top}")
    z = int(result.total_parasites[g])
    if z == 0:
        raise ValueError(f"generation {g} has no parasite")
    ks = np.arange(1, K + 1)
    light = int(np.dot(result.f_histogram[g, :K], ks))
    return (z - light) / z


def leaf_count(result, g: int) -> int:
    """Contaminated cells of generations < g whose daughters are both parasite-free."""
    return int(result.leaves_cumulative[g])


# -- experiments --------------------------------------------------------------


@dataclass
class RecoveryReport:
    horizon: int
    conditioned: dict
    unconditioned: dict
    exact_survival: tuple[float, float]
    z_score: float
    conditioned_ratios: np.ndarray = field(repr=False)

    def as_dict(self) -> dict:
        return {"horizon": self.horizon, "conditioned": self.conditioned,
                "unconditioned": self.unconditioned,
                "exact_survival": list(self.exact_survival), "z_score": self.z_score}


def _z(mean: float, se: float, lo: float, hi: float) -> float:
    """Distance from ``mean`` to the bracket [lo, hi] in standard errors."""
    gap = max(lo - mean, mean - hi, 0.0)
    if gap == 0.0:
        return 0.0
    return math.copysign(math.inf if not se > 0 else gap / se, mean - lo)


def estimate_recovery(config: SimConfig, threads: int | None = None) -> RecoveryReport:
    """Recovery ratio #G*_n / 2^n at the horizon, with and without conditioning."""
    n = config.horizon
    uncond = run_ensemble(replace(config, conditioning="none", sampler="rejection"), threads)
    cond = config if config.conditioning != "none" else replace(
        config, conditioning="survive_with_margin")
    cens = run_ensemble(cond, threads)
    ru = uncond.recovery_ratio[:, n]
    rc = cens.recovery_ratio[:, n]
    lo, hi = survival_curve(config.law, n)[n][:2]
    mu, se = mean_and_se(ru)
    return RecoveryReport(n, summarize_values(rc), summarize_values(ru), (lo, hi),
                          _z(mu, se, lo, hi), rc)


@dataclass
class IdentityReport:
    generations: list
    mc_mean: list
    mc_stderr: list
    exact_lower: list
    exact_upper: list
    z_score: list

    @property
    def max_abs_z(self) -> float:
        return max(abs(z) for z in self.z_score)

    def as_dict(self) -> dict:
        return asdict(self)


def mean_identity_check(config: SimConfig, threads: int | None = None) -> IdentityReport:
    """Monte Carlo mean of #G*_g / 2^g against the exact P(Z_g > 0), g = 0..horizon."""
    if config.conditioning != "none":
        raise ValueError("the mean identity holds for unconditioned ensembles")
    ens = run_ensemble(config, threads)
    ratios = ens.recovery_ratio
    brackets = survival_curve(config.law, config.horizon)
    rep = IdentityReport([], [], [], [], [], [])
    for g in range(config.horizon + 1):
        mu, se = mean_and_se(ratios[:, g])
        lo, hi = brackets[g][:2]
        rep.generations.append(g)
        rep.mc_mean.append(mu)
        rep.mc_stderr.append(se)
        rep.exact_lower.append(lo)
        rep.exact_upper.append(hi)
        rep.z_score.append(_z(mu, se, lo, hi) if se > 0 else (0.0 if lo <= mu <= hi else math.inf))
    return rep


def margin_sensitivity(config: SimConfig, margins=(2, 6, 10),
                       threads: int | None = None) -> dict[int, EnsembleStats]:
    """The same ensemble conditioned on survival ``margin`` generations past the horizon."""
    return {d: run_ensemble(replace(config, conditioning="survive_with_margin", margin=d),
                            threads)
            for d in margins}
