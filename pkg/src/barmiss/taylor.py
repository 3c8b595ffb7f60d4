"""Taylor coefficients of softplus f(x) = log(1 + e^x) around zero.

For q >= 2 the q-th derivative at zero is (2^q - 1) B_q / q, with B_q the
Bernoulli numbers, so c_q = f^(q)(0)/q! vanishes for odd q >= 3 and decays
like 2 / (q pi^q) for even q.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ConfigurationError

# exact rational recurrence budget
MAX_BERNOULLI = 128


@dataclass(frozen=True)
class BernoulliNumbers:
    values: tuple  # Fractions B_0..B_qmax, convention B_1 = -1/2

    def __getitem__(self, q: int) -> Fraction:
        return self.values[q]

    def __len__(self) -> int:
        return len(self.values)

    def as_float(self) -> np.ndarray:
        return np.array([float(b) for b in self.values])


@functools.lru_cache(maxsize=None)
def bernoulli_numbers(q_max: int) -> BernoulliNumbers:
    """B_0..B_{q_max} from sum_{j<=m} C(m+1, j) B_j = 0, in exact rationals.

    Double precision represents every value up to q_max = 64 without overflow
    concerns; larger tables stay exact as Fractions up to ``MAX_BERNOULLI``.
    """
    if q_max < 0:
        raise ConfigurationError("q_max must be non-negative")
    if q_max > MAX_BERNOULLI:
        raise ConfigurationError(f"q_max={q_max} exceeds the exact-arithmetic budget {MAX_BERNOULLI}")
    B = [Fraction(1)]
    for m in range(1, q_max + 1):
        acc = sum(math.comb(m + 1, j) * B[j] for j in range(m))
        B.append(-acc / (m + 1))
    return BernoulliNumbers(tuple(B))


@dataclass(frozen=True)
class CoeffTable:
    """c_0..c_{q_max} as doubles, plus the exact rational parts.

    ``exact[0]`` is 0: the constant log 2 is irrational and carried only in
    ``coeffs[0]``.
    """

    coeffs: np.ndarray
    exact: tuple
    q_max: int

    def __getitem__(self, q):
        return self.coeffs[q]

    def bound_products(self) -> np.ndarray:
        """|c_q| q pi^q for q = 0..q_max (zero at q = 0)."""
        q = np.arange(self.q_max + 1)
        return np.abs(self.coeffs) * q * np.pi ** q

    def derivatives(self) -> np.ndarray:
        """f^(q)(0) = c_q q!."""
        return np.array([self.coeffs[q] * math.factorial(q) for q in range(self.q_max + 1)])


@functools.lru_cache(maxsize=None)
def partition_coeffs(q_max: int) -> CoeffTable:
    if q_max < 0:
        raise ConfigurationError("q_max must be non-negative")
    B = bernoulli_numbers(max(q_max, 1))
    exact = [Fraction(0), Fraction(1, 2)]
    for q in range(2, q_max + 1):
        exact.append((2 ** q - 1) * B[q] / (q * math.factorial(q)))
    exact = exact[: q_max + 1]
    coeffs = np.array([float(c) for c in exact])
    coeffs[0] = math.log(2.0)
    coeffs.setflags(write=False)
    return CoeffTable(coeffs, tuple(exact), q_max)


def truncated_softplus(x, q: int):
    """sum_{d<=q} c_d x^d."""
    return np.polynomial.polynomial.polyval(x, partition_coeffs(q).coeffs)
