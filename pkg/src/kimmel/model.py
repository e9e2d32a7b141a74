"""Offspring laws of parasites, their moments, and the (m0, m1) regime map.

A law is the joint distribution of ``(Z0, Z1)``: the numbers of children a
single parasite sends into the first and the second daughter cell.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import binom

from .pmf import Pmf

FAMILIES = ("table", "binomial_split", "cluster", "linear_fractional_independent")

FLAG_ALL_ONE_ONE = "violates (1.2) first clause: (Z0, Z1) = (1, 1) a.s."
FLAG_ALL_SINGLE = "violates (1.2) second clause: (Z0, Z1) in {(1, 0), (0, 1)} a.s."
FLAG_ZERO_MEAN = "a daughter receives no parasites on average (m0 = 0 or m1 = 0)"

DEFAULT_TAIL_TOL = 1e-12


@dataclass(frozen=True)
class OffspringLaw:
    """Finite joint law of ``(Z0, Z1)``.

    ``support`` is a tuple of ``((k0, k1), prob)`` sorted by ``(k0, k1)``.
    Instances are immutable and hashable, so they can key caches.
    """

    support: tuple
    family_tag: str = "table"
    folded_tail: float = field(default=0.0, compare=False)

    def __post_init__(self):
        if not self.support:
            raise ValueError("offspring law needs a nonempty support")
        if self.family_tag not in FAMILIES:
            raise ValueError(f"unknown family tag {self.family_tag!r}")
        seen = set()
        for (k0, k1), p in self.support:
            if (k0, k1) in seen:
                raise ValueError(f"duplicate support point {(k0, k1)}")
            seen.add((k0, k1))
            if k0 < 0 or k1 < 0:
                raise ValueError("offspring counts must be nonnegative")
            if not p > 0:
                raise ValueError("support probabilities must be positive")
        if abs(math.fsum(p for _, p in self.support) - 1.0) > 1e-12:
            raise ValueError("support probabilities must sum to 1")

    # numpy views, built lazily
    @cached_property
    def k0(self) -> np.ndarray:
        return np.array([k[0] for k, _ in self.support], dtype=np.int64)

    @cached_property
    def k1(self) -> np.ndarray:
        return np.array([k[1] for k, _ in self.support], dtype=np.int64)

    @cached_property
    def prob(self) -> np.ndarray:
        return np.array([p for _, p in self.support], dtype=np.float64)

    @cached_property
    def flags(self) -> tuple[str, ...]:
        p11 = math.fsum(p for k, p in self.support if k == (1, 1))
        p_single = math.fsum(p for k, p in self.support if k in ((1, 0), (0, 1)))
        out = []
        if p11 >= 1.0 - 1e-12:
            out.append(FLAG_ALL_ONE_ONE)
        if p_single >= 1.0 - 1e-12:
            out.append(FLAG_ALL_SINGLE)
        if self.mean(0) == 0.0 or self.mean(1) == 0.0:
            out.append(FLAG_ZERO_MEAN)
        return tuple(out)

    @property
    def admissible(self) -> bool:
        return not self.flags

    def mean(self, a: int) -> float:
        ks = self.k0 if a == 0 else self.k1
        return math.fsum(float(k) * p for k, p in zip(ks, self.prob))

    def as_table(self) -> list[list]:
        return [[int(k0), int(k1), float(p)] for (k0, k1), p in self.support]

    def __repr__(self):
        return f"OffspringLaw({self.family_tag}, |support|={len(self.support)})"


def _build(entries: Iterable[tuple[int, int, float]], family_tag: str, folded_tail=0.0):
    acc: dict[tuple[int, int], float] = {}
    for k0, k1, p in entries:
        if p > 0:
            acc[(int(k0), int(k1))] = acc.get((int(k0), int(k1)), 0.0) + float(p)
    if not acc:
        raise ValueError("offspring law has empty support")
    total = math.fsum(acc.values())
    support = tuple(sorted(((k, p / total) for k, p in acc.items()), key=lambda kp: kp[0]))
    # renormalized to sum exactly; compensate the largest atom for rounding
    drift = 1.0 - math.fsum(p for _, p in support)
    if drift:
        i = max(range(len(support)), key=lambda j: support[j][1])
        support = support[:i] + ((support[i][0], support[i][1] + drift),) + support[i + 1 :]
    return OffspringLaw(support, family_tag, folded_tail)


def from_table(entries: Sequence[Sequence]) -> OffspringLaw:
    """Law from ``(k0, k1, prob)`` rows. Repeated pairs are merged, zero rows dropped."""
    if len(entries) == 0:
        raise ValueError("offspring table is empty")
    rows = []
    for row in entries:
        if len(row) != 3:
            raise ValueError(f"table rows are (k0, k1, prob), got {row!r}")
        k0, k1, p = row
        for k in (k0, k1):
            if isinstance(k, bool) or not float(k).is_integer():
                raise ValueError(f"offspring counts must be integers, got {k!r}")
            if k < 0:
                raise ValueError("offspring counts must be nonnegative")
        if not math.isfinite(p) or p < 0:
            raise ValueError(f"negative or non-finite probability {p!r}")
        rows.append((int(k0), int(k1), float(p)))
    total = math.fsum(p for *_, p in rows)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {total!r}, not 1")
    return _build(rows, "table")


def _check_prob(p: float):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p!r}")


def binomial_split(z_pmf: Pmf, p: float) -> OffspringLaw:
    """Every child independently joins the first daughter with probability ``p``."""
    _check_prob(p)
    if z_pmf.overflow > 0:
        raise ValueError("reproduction law must have no overflow mass")
    rows = []
    for z, pz in enumerate(z_pmf.mass):
        if pz <= 0:
            continue
        k0 = np.arange(z + 1)
        for a, w in zip(k0, binom.pmf(k0, z, p)):
            rows.append((int(a), z - int(a), pz * w))
    return _build(rows, "binomial_split")


def cluster(z_pmf: Pmf, p: float) -> OffspringLaw:
    """The whole litter of size Z goes to the first daughter with probability ``p``."""
    _check_prob(p)
    if z_pmf.overflow > 0:
        raise ValueError("reproduction law must have no overflow mass")
    rows = []
    for z, pz in enumerate(z_pmf.mass):
        if pz > 0:
            rows.append((z, 0, p * pz))
            rows.append((0, z, (1.0 - p) * pz))
    return _build(rows, "cluster")


def linear_fractional_marginal(b: float, p: float, kmax: int | None = None,
                               tail_tol: float = DEFAULT_TAIL_TOL) -> tuple[np.ndarray, float]:
    """Masses P(Z=k) = b p^(k-1) (k >= 1) on {0..kmax}, tail folded into ``kmax``.

    Returns the mass array and the folded tail probability.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p!r}")
    if not 0.0 < b < (1.0 - p) ** 2:
        raise ValueError(f"b must lie in (0, (1-p)^2) = (0, {(1 - p) ** 2!r}), got {b!r}")

    def tail(k):  # P(Z > k)
        return b * p**k / (1.0 - p)

    if kmax is None:
        kmax = 1
        while tail(kmax) >= tail_tol:
            kmax += 1
    elif kmax < 1 or tail(kmax) >= tail_tol:
        raise ValueError(f"kmax={kmax} leaves tail mass {tail(kmax):.3g} >= {tail_tol:g}")
    mass = np.empty(kmax + 1)
    mass[0] = (1.0 - b - p) / (1.0 - p)
    mass[1:] = b * p ** np.arange(kmax)
    folded = tail(kmax)
    mass[kmax] += folded
    return mass, folded


def linear_fractional_independent(b: float, p: float, kmax: int | None = None) -> OffspringLaw:
    """Independent coordinates, both with the linear fractional marginal."""
    mass, folded = linear_fractional_marginal(b, p, kmax)
    rows = [(i, j, mass[i] * mass[j]) for i in range(mass.size) for j in range(mass.size)]
    return _build(rows, "linear_fractional_independent", folded_tail=folded)


# ---------------------------------------------------------------------------
# generating functions and projections


def marginal(law: OffspringLaw, a: int) -> Pmf:
    ks = law.k0 if a == 0 else law.k1
    mass = np.zeros(int(ks.max()) + 1)
    np.add.at(mass, ks, law.prob)
    return Pmf(mass)


def total_offspring_law(law: OffspringLaw) -> Pmf:
    """Law of Z0 + Z1, the reproduction law of the total parasite count."""
    ks = law.k0 + law.k1
    mass = np.zeros(int(ks.max()) + 1)
    np.add.at(mass, ks, law.prob)
    return Pmf(mass)


def pgf_eval(law: OffspringLaw, a: int, s, extended: bool = False):
    """E[s^{Z_a}]. ``extended`` lifts the [0, 1] guard (used for root finding)."""
    if a not in (0, 1):
        raise ValueError("daughter index must be 0 or 1")
    s_arr = np.asarray(s, dtype=np.float64)
    if not extended and (np.any(s_arr < 0) or np.any(s_arr > 1)):
        raise ValueError("generating function argument must lie in [0, 1]")
    out = marginal(law, a).pgf(s_arr)
    return float(out) if out.ndim == 0 else out


def pgf_compose(law: OffspringLaw, path: Sequence[int], s):
    """f_{a1} o ... o f_{an}(s); the last letter of ``path`` is applied first."""
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > 1):
        raise ValueError("generating function argument must lie in [0, 1]")
    val = s_arr
    for a in reversed(tuple(path)):
        val = pgf_eval(law, a, val)
    val = np.asarray(val)
    return float(val) if val.ndim == 0 else val


# ---------------------------------------------------------------------------
# regimes


@dataclass(frozen=True)
class Regime:
    label: str
    sublabel: str | None = None
    boundary_proximity: tuple[str, ...] = ()
    note: str | None = None

    def __str__(self):
        return self.label if self.sublabel is None else f"{self.label} ({self.sublabel})"


def xlogx(m0: float, m1: float) -> float:
    return m0 * math.log(m0) + m1 * math.log(m1)


def classify_regime(m0: float, m1: float, tol: float = 1e-12) -> Regime:
    """Place (m0, m1) in one of the five domains D1..D5.

    D1: m0+m1 < 1.  D2: m0+m1 = 1.  D5: m0*m1 > 1.
    Otherwise (m0+m1 > 1, m0*m1 <= 1): D3 when m0 ln m0 + m1 ln m1 < 0,
    else D4, whose boundary pieces m0*m1 = 1 and m0 ln m0 + m1 ln m1 = 0
    carry sublabels. The line m0*m1 = 1 is assigned to D4.
    """
    if not (m0 > 0 and m1 > 0):
        raise ValueError(f"means must be positive, got m0={m0!r}, m1={m1!r}")
    total, prod, xl = m0 + m1, m0 * m1, xlogx(m0, m1)
    near = []
    if abs(total - 1.0) <= 10 * tol:
        near.append("m0+m1=1")
    if abs(prod - 1.0) <= 10 * tol:
        near.append("m0*m1=1")
    if abs(xl) <= 10 * tol:
        near.append("m0*ln(m0)+m1*ln(m1)=0")
    near = tuple(near)
    if total < 1.0 - tol:
        return Regime("D1", boundary_proximity=near)
    if abs(total - 1.0) <= tol:
        return Regime("D2", boundary_proximity=near)
    if prod > 1.0 + tol:
        return Regime("D5", boundary_proximity=near)
    if abs(prod - 1.0) <= tol:
        return Regime("D4", "boundary_supercritical", near)
    if xl < -tol:
        return Regime("D3", boundary_proximity=near)
    if abs(xl) <= tol:
        return Regime("D4", "boundary_intermediate", near)
    return Regime("D4", "interior", near)


# ---------------------------------------------------------------------------
# summary


@dataclass(frozen=True)
class ModelSummary:
    m0: float
    m1: float
    m: float
    sum_mean: float
    prod_mean: float
    xlogx: float
    m_hat: float
    m_check: float
    bgw_extinction: float
    bpre_extinct_as: bool
    regime: Regime
    admissible: bool
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "m0": self.m0, "m1": self.m1, "m": self.m,
            "sum_mean": self.sum_mean, "prod_mean": self.prod_mean,
            "xlogx": self.xlogx, "m_hat": self.m_hat, "m_check": self.m_check,
            "bgw_extinction": self.bgw_extinction,
            "bpre_extinct_as": self.bpre_extinct_as,
            "regime": self.regime.label, "sublabel": self.regime.sublabel,
            "boundary_proximity": list(self.regime.boundary_proximity),
            "regime_note": self.regime.note,
            "admissible": self.admissible, "flags": list(self.flags),
        }


def extinction_probability(total: Pmf, tol: float = 1e-14) -> float:
    """Smallest fixed point in [0, 1] of the generating function of ``total``."""
    mass = total.mass
    if mass[0] == 0.0:
        return 0.0
    mean = math.fsum(k * p for k, p in enumerate(mass))
    if mean <= 1.0:
        return 1.0

    def h(s):
        return total.pgf(s) - s

    # h > 0 on [0, q) and h < 0 on (q, 1) for a supercritical law
    lo, delta = 0.0, 0.5
    hi = 1.0 - delta
    while h(hi) >= 0.0:
        lo = hi
        delta /= 2.0
        hi = 1.0 - delta
        if delta < 1e-300:
            return 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if h(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def summarize(law: OffspringLaw, tol: float = 1e-12) -> ModelSummary:
    m0, m1 = law.mean(0), law.mean(1)
    tot = (law.k0 + law.k1).astype(np.float64)
    m_hat = math.fsum(t * (t - 1.0) * p for t, p in zip(tot, law.prob))
    m_check = math.fsum(t * math.log(t) * p for t, p in zip(tot, law.prob) if t > 1)
    flags = law.flags
    total = total_offspring_law(law)
    if total.mass.size == 2 and total.mass[1] == 1.0:
        ext = 0.0  # one child per parasite: the count never changes
    else:
        ext = extinction_probability(total)
    if m0 > 0 and m1 > 0:
        regime = classify_regime(m0, m1, tol)
        xl = xlogx(m0, m1)
    else:
        regime = Regime("none")
        xl = float("nan")
    if flags:
        regime = Regime(regime.label, regime.sublabel, regime.boundary_proximity,
                        "non-admissible model")
    return ModelSummary(
        m0=m0, m1=m1, m=0.5 * (m0 + m1), sum_mean=m0 + m1, prod_mean=m0 * m1,
        xlogx=xl, m_hat=m_hat, m_check=m_check, bgw_extinction=ext,
        bpre_extinct_as=m0 * m1 <= 1.0, regime=regime, admissible=not flags, flags=flags,
    )


# ---------------------------------------------------------------------------
# config files


_FAMILY_FIELDS = {
    "table": {"table"},
    "binomial_split": {"z_pmf", "p"},
    "cluster": {"z_pmf", "p"},
    "linear_fractional_independent": {"b", "p", "kmax"},
}
_OPTIONAL = {"linear_fractional_independent": {"kmax"}}


class ConfigError(ValueError):
    """Model config does not match the schema."""


def _z_pmf(rows) -> Pmf:
    if not isinstance(rows, list) or not rows:
        raise ConfigError("z_pmf must be a nonempty list of [k, prob]")
    probs: dict[int, float] = {}
    for row in rows:
        if not (isinstance(row, list) and len(row) == 2):
            raise ConfigError(f"z_pmf rows are [k, prob], got {row!r}")
        k, p = row
        if not isinstance(k, int) or isinstance(k, bool) or k < 0:
            raise ConfigError(f"z_pmf counts must be nonnegative integers, got {k!r}")
        if not isinstance(p, (int, float)) or p < 0:
            raise ConfigError(f"z_pmf probabilities must be nonnegative, got {p!r}")
        probs[k] = probs.get(k, 0.0) + float(p)
    if abs(math.fsum(probs.values()) - 1.0) > 1e-9:
        raise ConfigError("z_pmf probabilities must sum to 1")
    return Pmf.from_dict(probs)


def law_from_config(cfg: dict) -> OffspringLaw:
    """Build a law from the JSON config schema; raise ConfigError on schema violations."""
    if not isinstance(cfg, dict):
        raise ConfigError("model config must be a JSON object")
    family = cfg.get("family")
    if family not in _FAMILY_FIELDS:
        raise ConfigError(f"'family' must be one of {FAMILIES}, got {family!r}")
    allowed = _FAMILY_FIELDS[family] | {"family"}
    required = allowed - _OPTIONAL.get(family, set())
    extra = set(cfg) - allowed
    missing = required - set(cfg)
    if extra:
        raise ConfigError(f"unexpected fields for family {family}: {sorted(extra)}")
    if missing:
        raise ConfigError(f"missing fields for family {family}: {sorted(missing)}")
    try:
        if family == "table":
            if not isinstance(cfg["table"], list):
                raise ConfigError("table must be a list of [k0, k1, prob]")
            return from_table(cfg["table"])
        if family in ("binomial_split", "cluster"):
            p = cfg["p"]
            if not isinstance(p, (int, float)) or isinstance(p, bool):
                raise ConfigError("p must be a number")
            build = binomial_split if family == "binomial_split" else cluster
            return build(_z_pmf(cfg["z_pmf"]), float(p))
        kmax = cfg.get("kmax")
        if kmax is not None and (not isinstance(kmax, int) or isinstance(kmax, bool)):
            raise ConfigError("kmax must be an integer")
        return linear_fractional_independent(float(cfg["b"]), float(cfg["p"]), kmax)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def load_law(path) -> OffspringLaw:
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return law_from_config(cfg)
