"""Truncated probability mass functions on {0..K} with explicit overflow mass."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

MASS_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Pmf:
    """Law of a nonnegative integer variable truncated at ``K = len(mass) - 1``.

    ``overflow`` is the probability that the variable exceeds ``K``.
    """

    mass: np.ndarray
    overflow: float = 0.0

    def __post_init__(self):
        mass = np.array(self.mass, dtype=np.float64).ravel()
        if mass.size == 0:
            raise ValueError("Pmf needs at least one atom")
        if np.any(mass < 0) or not np.all(np.isfinite(mass)):
            raise ValueError("Pmf masses must be finite and nonnegative")
        if self.overflow < 0:
            raise ValueError("overflow mass must be nonnegative")
        total = math.fsum(mass) + self.overflow
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"Pmf mass sums to {total!r}, expected 1")
        mass.setflags(write=False)
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "overflow", float(self.overflow))

    @classmethod
    def delta(cls, k: int, K: int | None = None) -> "Pmf":
        K = k if K is None else K
        if k > K:
            return cls(np.zeros(K + 1), 1.0)
        mass = np.zeros(K + 1)
        mass[k] = 1.0
        return cls(mass)

    @classmethod
    def from_dict(cls, probs: dict[int, float], K: int | None = None) -> "Pmf":
        if not probs:
            raise ValueError("empty pmf")
        if any(k < 0 for k in probs):
            raise ValueError("pmf support must be nonnegative")
        K = max(probs) if K is None else K
        mass = np.zeros(K + 1)
        overflow = 0.0
        for k, p in probs.items():
            if k > K:
                overflow += p
            else:
                mass[k] += p
        return cls(mass, overflow)

    @property
    def K(self) -> int:
        return self.mass.size - 1

    def __getitem__(self, k: int) -> float:
        if 0 <= k <= self.K:
            return float(self.mass[k])
        return 0.0

    def total(self) -> float:
        return math.fsum(self.mass) + self.overflow

    def mean(self) -> float:
        """Mean over {0..K}; overflow mass is excluded."""
        return float(np.dot(np.arange(self.mass.size), self.mass))

    def positive_mass(self) -> float:
        return math.fsum(self.mass[1:])

    def with_bound(self, K: int) -> "Pmf":
        """Re-truncate at ``K``, moving any mass above it into overflow."""
        if K == self.K:
            return self
        if K > self.K:
            mass = np.zeros(K + 1)
            mass[: self.mass.size] = self.mass
            return Pmf(mass, self.overflow)
        return Pmf(self.mass[: K + 1], self.overflow + math.fsum(self.mass[K + 1 :]))

    def pgf(self, s):
        """Generating function of the in-range part (overflow contributes nothing)."""
        return np.polynomial.polynomial.polyval(s, self.mass)

    def to_dict(self, tol: float = 0.0) -> dict[int, float]:
        return {int(k): float(p) for k, p in enumerate(self.mass) if p > tol}

    def to_csv(self) -> str:
        out = io.StringIO(newline="")
        out.write("k,prob\n")
        for k, p in enumerate(self.mass):
            out.write(f"{k},{format_float(p)}\n")
        out.write(f"overflow,{format_float(self.overflow)}\n")
        return out.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Pmf":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or lines[0] != "k,prob":
            raise ValueError("expected header 'k,prob'")
        mass, overflow = [], 0.0
        for ln in lines[1:]:
            key, val = ln.split(",")
            if key == "overflow":
                overflow = float(val)
            else:
                if int(key) != len(mass):
                    raise ValueError("pmf rows must be ordered by k from 0")
                mass.append(float(val))
        return cls(np.array(mass), overflow)


def format_float(x: float) -> str:
    """17 significant digits, '.' decimal point; round-trips float64 exactly."""
    return format(float(x), ".17g")


def truncated_convolve(a: Pmf, b: Pmf, K: int) -> Pmf:
    """Law of the sum of independent ``a`` and ``b`` truncated at ``K``."""
    full = np.convolve(a.mass, b.mass)
    inside = full[: K + 1]
    spill = math.fsum(full[K + 1 :])
    # a sum with an overflowing summand overflows too
    overflow = a.overflow + b.overflow - a.overflow * b.overflow + spill
    mass = np.zeros(K + 1)
    mass[: inside.size] = inside
    return Pmf(mass, min(overflow, 1.0))


def convolution_power(base: Pmf, n: int, K: int) -> Pmf:
    """Law of the sum of ``n`` i.i.d. copies of ``base``, truncated at ``K``.

    Binary exponentiation of the truncated convolution.
    """
    if K < 0:
        raise ValueError("truncation bound K must be nonnegative")
    if n < 0:
        raise ValueError("n must be nonnegative")
    result = Pmf.delta(0, K)
    square = base.with_bound(K)
    while n:
        if n & 1:
            result = truncated_convolve(result, square, K)
        n >>= 1
        if n:
            square = truncated_convolve(square, square, K)
    return result
