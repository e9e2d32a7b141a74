"""Distances, intervals, fits and ensemble aggregation."""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
from scipy.stats import norm

from .pmf import format_float

QUANTILES = (0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99)
SERIES = ("n_contaminated", "total_parasites", "leaves_cumulative", "max_cell_count",
          "recovery_ratio")


def _freq(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).ravel()
    if abs(math.fsum(a) - 1.0) > 1e-9:
        raise ValueError(f"{name} is not normalized (sum {math.fsum(a)!r})")
    return a


def l1_distance(a, b) -> float:
    """Sum of |a_k - b_k| over aligned frequency sequences (tail bucket included)."""
    a, b = _freq(a, "a"), _freq(b, "b")
    if a.size != b.size:
        raise ValueError(f"misaligned frequency sequences ({a.size} vs {b.size} buckets)")
    return math.fsum(np.abs(a - b))


def ks_distance_integer(a, b) -> float:
    """Largest CDF gap between two aligned laws on 0, 1, 2, ..."""
    a, b = _freq(a, "a"), _freq(b, "b")
    if a.size != b.size:
        raise ValueError(f"misaligned frequency sequences ({a.size} vs {b.size} buckets)")
    return float(np.max(np.abs(np.cumsum(a) - np.cumsum(b))))


def empirical_pmf(samples, size: int | None = None) -> np.ndarray:
    """Frequencies of nonnegative integer samples on 0..size-1."""
    samples = np.asarray(samples, dtype=np.int64)
    if samples.size == 0:
        raise ValueError("no samples")
    size = int(samples.max()) + 1 if size is None else size
    return np.bincount(samples, minlength=size)[:size] / samples.size


def ks_from_samples(x, y) -> float:
    n = int(max(np.max(x), np.max(y))) + 1
    return ks_distance_integer(empirical_pmf(x, n), empirical_pmf(y, n))


def wilson_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    if trials <= 0:
        raise ValueError("Wilson interval needs at least one trial")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    z = float(norm.ppf(0.5 + confidence / 2))
    phat = successes / trials
    denom = 1 + z * z / trials
    centre = (phat + z * z / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials)) / denom
    lo = 0.0 if successes == 0 else max(0.0, centre - half)
    hi = 1.0 if successes == trials else min(1.0, centre + half)
    return lo, hi


class GrowthFit(NamedTuple):
    rate: float
    r2: float


def growth_rate_fit(series, window: tuple[int, int] | None = None) -> GrowthFit:
    """Exponentiated least-squares slope of ln(series) over ``window`` (inclusive)."""
    y = np.asarray(series, dtype=np.float64)
    lo, hi = (0, y.size - 1) if window is None else window
    g = np.arange(lo, hi + 1)
    y = y[lo : hi + 1]
    if y.size < 4:
        raise ValueError("growth_rate_fit needs at least 4 points")
    if np.any(y <= 0):
        raise ValueError("growth_rate_fit needs positive values in the window")
    ly = np.log(y)
    slope, intercept = np.polyfit(g, ly, 1)
    resid = ly - (slope * g + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return GrowthFit(float(math.exp(slope)), r2)


def mean_and_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return math.nan, math.nan
    if x.size == 1:
        return float(x[0]), math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


@dataclass
class EnsembleStats:
    """Aggregated observables of the accepted replicates, in replicate-id order."""

    horizon: int
    k_top: int
    attempted: int
    accepted_count: int
    acceptance_interval: tuple[float, float]
    replicate_ids: np.ndarray
    n_contaminated: np.ndarray
    total_parasites: np.ndarray
    total_saturated: np.ndarray
    leaves_cumulative: np.ndarray
    max_cell_count: np.ndarray
    extinction_generation: np.ndarray
    f_sum: np.ndarray
    f_sumsq: np.ndarray
    f_n: np.ndarray
    f_pooled: np.ndarray
    mass_cdf_sum: np.ndarray
    mass_n: np.ndarray
    ancestor_sum: np.ndarray | None = None
    ancestor_n: int = 0
    ancestor_pooled: np.ndarray | None = None
    multiplicity_pooled: np.ndarray | None = None
    multiplicity_excluded: int = 0
    exact_acceptance: float | None = None
    config: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted_count / self.attempted if self.attempted else math.nan

    @property
    def recovery_ratio(self) -> np.ndarray:
        return self.n_contaminated / np.exp2(np.arange(self.horizon + 1))

    def series(self, name: str) -> np.ndarray:
        if name not in SERIES:
            raise KeyError(name)
        return getattr(self, name)

    def mean(self, name: str) -> np.ndarray:
        return self.series(name).mean(axis=0)

    def stderr(self, name: str) -> np.ndarray:
        x = self.series(name).astype(np.float64)
        if x.shape[0] < 2:
            return np.full(x.shape[1], math.nan)
        return x.std(axis=0, ddof=1) / math.sqrt(x.shape[0])

    def quantile(self, name: str, q: float) -> np.ndarray:
        return np.quantile(self.series(name), q, axis=0)

    def f_mean(self, g: int) -> np.ndarray:
        """Ensemble mean of F_k(g) over replicates alive at ``g``; last bucket is > k_top."""
        if self.f_n[g] == 0:
            raise ValueError(f"no accepted replicate is alive at generation {g}")
        return self.f_sum[g] / self.f_n[g]

    def f_stderr(self, g: int) -> np.ndarray:
        n = self.f_n[g]
        if n < 2:
            return np.full(self.k_top + 1, math.nan)
        mu = self.f_sum[g] / n
        var = np.maximum(self.f_sumsq[g] / n - mu * mu, 0.0) * n / (n - 1)
        return np.sqrt(var / n)

    def heavy_cell_mass(self, g: int, K: int) -> float:
        """Ensemble mean fraction of parasites sitting in cells with more than K."""
        if K > self.k_top:
            raise ValueError(f"K={K} exceeds the tracked k_top={self.k_top}")
        if self.mass_n[g] == 0:
            raise ValueError(f"no accepted replicate is alive at generation {g}")
        return max(0.0, 1.0 - float(self.mass_cdf_sum[g, K - 1]) / self.mass_n[g])

    def ancestor_mean(self) -> np.ndarray:
        """Ensemble-mean ancestor count histogram, normalized to frequencies.

        Cells of all accepted replicates are pooled, which avoids the ratio
        bias of averaging per-replicate proportions over few cells.
        """
        if self.ancestor_pooled is None:
            raise ValueError("ancestor tracking was not configured")
        total = self.ancestor_pooled.sum()
        if total == 0:
            raise ValueError("no accepted replicate is alive at the ancestor generation")
        return self.ancestor_pooled / total

    def ancestor_replicate_mean(self) -> np.ndarray:
        """Mean over replicates of the per-replicate ancestor proportions."""
        if self.ancestor_sum is None:
            raise ValueError("ancestor tracking was not configured")
        if self.ancestor_n == 0:
            raise ValueError("no accepted replicate is alive at the ancestor generation")
        return self.ancestor_sum / self.ancestor_n

    def multiplicity_fraction(self, K_anc: int, at_least: int = 2) -> float:
        """Pooled fraction of horizon cells with ancestor count <= K_anc holding >= at_least tags."""
        if self.multiplicity_pooled is None:
            raise ValueError("tagging was not configured")
        rows = self.multiplicity_pooled[: min(K_anc, self.k_top)]
        total = rows.sum()
        if total == 0:
            raise ValueError("no cell qualifies for the multiplicity statistic")
        return float(rows[:, at_least - 1 :].sum() / total)

    # serialization

    def to_csv(self, name: str) -> str:
        """One observable as rows of generation, statistic, value, stderr."""
        out = io.StringIO(newline="")
        out.write("generation,statistic,value,stderr\n")
        if name == "f":
            for g in range(self.horizon + 1):
                if self.f_n[g] == 0:
                    continue
                mu, se = self.f_mean(g), self.f_stderr(g)
                for k in range(self.k_top + 1):
                    label = f"F_{k + 1}" if k < self.k_top else f"F_gt{self.k_top}"
                    out.write(f"{g},{label},{format_float(mu[k])},{_fmt(se[k])}\n")
            return out.getvalue()
        mu, se = self.mean(name), self.stderr(name)
        x = self.series(name)
        for g in range(self.horizon + 1):
            out.write(f"{g},mean,{format_float(mu[g])},{_fmt(se[g])}\n")
            if x.shape[0]:
                out.write(f"{g},variance,{_fmt(x[:, g].var(ddof=1) if x.shape[0] > 1 else math.nan)},\n")
                for q in QUANTILES:
                    out.write(f"{g},q{q:g},{format_float(np.quantile(x[:, g], q))},\n")
        return out.getvalue()

    def summary(self) -> dict:
        lo, hi = self.acceptance_interval
        d = {
            "config": self.config,
            "horizon": self.horizon,
            "k_top": self.k_top,
            "attempted": self.attempted,
            "accepted_count": self.accepted_count,
            "acceptance_rate": self.acceptance_rate,
            "acceptance_interval": [lo, hi],
            "exact_acceptance": self.exact_acceptance,
            "any_saturated": bool(self.total_saturated.any()),
        }
        if self.accepted_count:
            d["per_generation"] = {
                name: {"mean": self.mean(name).tolist(), "stderr": _nan_to_none(self.stderr(name))}
                for name in SERIES
            }
        if self.multiplicity_pooled is not None:
            d["multiplicity_excluded"] = self.multiplicity_excluded
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), sort_keys=True, indent=1, allow_nan=False) + "\n"


def _fmt(x) -> str:
    return "" if not np.isfinite(x) else format_float(x)


def _nan_to_none(a) -> list:
    return [None if not np.isfinite(v) else float(v) for v in a]


class EnsembleAccumulator:
    """Deterministic fold of accepted replicates, fed in replicate-id order."""

    def __init__(self, horizon: int, k_top: int, n_top: int = 8,
                 ancestors: bool = False, tagged: bool = False):
        G = horizon + 1
        self.horizon, self.k_top = horizon, k_top
        self.ids, self.rows = [], {k: [] for k in ("nc", "zt", "zsat", "leaves", "maxc", "ext")}
        self.f_sum = np.zeros((G, k_top + 1))
        self.f_sumsq = np.zeros((G, k_top + 1))
        self.f_n = np.zeros(G, dtype=np.int64)
        self.f_pooled = np.zeros((G, k_top + 1), dtype=np.int64)
        self.mass_sum = np.zeros((G, k_top))
        self.mass_n = np.zeros(G, dtype=np.int64)
        self.anc_sum = np.zeros(k_top + 1) if ancestors else None
        self.anc_pooled = np.zeros(k_top + 1, dtype=np.int64) if ancestors else None
        self.anc_n = 0
        self.mult = np.zeros((k_top + 1, n_top + 1), dtype=np.int64) if tagged else None
        self.excluded = 0

    def add(self, ids, nc, zt, zsat, leaves, maxc, hist, ext, anc=None, mult=None, excluded=None):
        """Fold one chunk of replicates (rows already in replicate-id order)."""
        if len(ids) == 0:
            return
        self.ids.append(np.asarray(ids, dtype=np.int64))
        for key, arr in zip(("nc", "zt", "zsat", "leaves", "maxc", "ext"),
                            (nc, zt, zsat, leaves, maxc, ext)):
            self.rows[key].append(np.asarray(arr))
        hist = np.asarray(hist, dtype=np.int64)
        alive = nc > 0
        with np.errstate(invalid="ignore", divide="ignore"):
            f = hist / np.where(alive, nc, 1)[:, :, None]
        f[~alive] = 0.0
        self.f_sum += f.sum(axis=0)
        self.f_sumsq += (f * f).sum(axis=0)
        self.f_n += alive.sum(axis=0)
        self.f_pooled += hist.sum(axis=0)
        # fraction of parasites in cells holding at most k, k = 1..k_top
        ks = np.arange(1, self.k_top + 1)
        cum = np.cumsum(hist[:, :, : self.k_top] * ks, axis=2)
        live = (zt > 0) & ~zsat
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = cum / np.where(live, zt, 1)[:, :, None]
        frac[~live] = 0.0
        self.mass_sum += frac.sum(axis=0)
        self.mass_n += live.sum(axis=0)
        if self.anc_sum is not None:
            anc = np.asarray(anc, dtype=np.int64)
            tot = anc.sum(axis=1)
            ok = tot > 0
            self.anc_sum += (anc[ok] / tot[ok, None]).sum(axis=0)
            self.anc_pooled += anc.sum(axis=0)
            self.anc_n += int(ok.sum())
        if self.mult is not None:
            self.mult += np.asarray(mult, dtype=np.int64).sum(axis=0)
            self.excluded += int(np.sum(excluded))

    def finish(self, attempted: int, exact_acceptance=None, config=None) -> EnsembleStats:
        G = self.horizon + 1

        def cat(key, dtype):
            if not self.rows[key]:
                return np.zeros((0, G) if key != "ext" else (0,), dtype=dtype)
            return np.concatenate(self.rows[key]).astype(dtype)

        ids = np.concatenate(self.ids) if self.ids else np.zeros(0, dtype=np.int64)
        accepted = int(ids.size)
        interval = wilson_interval(accepted, attempted) if attempted else (math.nan, math.nan)
        return EnsembleStats(
            horizon=self.horizon, k_top=self.k_top, attempted=attempted,
            accepted_count=accepted, acceptance_interval=interval, replicate_ids=ids,
            n_contaminated=cat("nc", np.int64), total_parasites=cat("zt", np.int64),
            total_saturated=cat("zsat", np.bool_), leaves_cumulative=cat("leaves", np.int64),
            max_cell_count=cat("maxc", np.int64), extinction_generation=cat("ext", np.int64),
            f_sum=self.f_sum, f_sumsq=self.f_sumsq, f_n=self.f_n, f_pooled=self.f_pooled,
            mass_cdf_sum=self.mass_sum, mass_n=self.mass_n,
            ancestor_sum=self.anc_sum, ancestor_n=self.anc_n, ancestor_pooled=self.anc_pooled,
            multiplicity_pooled=self.mult, multiplicity_excluded=self.excluded,
            exact_acceptance=exact_acceptance, config=dict(config or {}),
        )


def aggregate(results: Iterable, attempted: int | None = None,
              chunk: int = 1024) -> EnsembleStats:
    """Fold accepted replicate results; independent of the order they are given in.

    Results are sorted by replicate id and folded in chunks of ids sharing
    ``id // chunk``, the same grouping the ensemble runner uses, so both
    paths give bit-identical statistics.
    """
    results = sorted(results, key=lambda r: r.replicate_id)
    if not results:
        raise ValueError("aggregate needs at least one result")
    first = results[0]
    acc = EnsembleAccumulator(first.horizon, first.k_top,
                              n_top=first.n_top,
                              ancestors=first.ancestor_histogram is not None,
                              tagged=first.multiplicity_histogram is not None)
    kept = [r for r in results if r.accepted]
    groups: dict[int, list] = {}
    for r in kept:
        groups.setdefault(r.replicate_id // chunk, []).append(r)
    for key in sorted(groups):
        rs = groups[key]
        acc.add(
            [r.replicate_id for r in rs],
            np.stack([r.n_contaminated for r in rs]),
            np.stack([r.total_parasites for r in rs]),
            np.stack([r.total_saturated for r in rs]),
            np.stack([r.leaves_cumulative for r in rs]),
            np.stack([r.max_cell_count for r in rs]),
            np.stack([r.f_histogram for r in rs]),
            np.array([-1 if r.extinction_generation is None else r.extinction_generation
                      for r in rs]),
            anc=None if acc.anc_sum is None else np.stack([r.ancestor_histogram for r in rs]),
            mult=None if acc.mult is None else np.stack([r.multiplicity_histogram for r in rs]),
            excluded=None if acc.mult is None else [r.multiplicity_excluded for r in rs],
        )
    return acc.finish(len(results) if attempted is None else attempted)


def summarize_values(x: Sequence[float]) -> dict:
    """Mean, standard error and the standard quantiles of a sample."""
    x = np.asarray(x, dtype=np.float64)
    mu, se = mean_and_se(x)
    d = {"n": int(x.size), "mean": mu, "stderr": None if not np.isfinite(se) else se}
    if x.size:
        d.update({f"q{q:g}": float(np.quantile(x, q)) for q in QUANTILES})
    return d
