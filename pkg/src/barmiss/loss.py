"""Row losses of the BAR model and their gradients.

Three families are available for row m with weights ``a`` and intercept ``nu``
(``y_t = nu + a . x_t``, averaged over the T-1 usable transitions):

* complete     mean_t f(y_t) - x_{t+1,m} y_t                      f = softplus
* truncated(q) same, with f replaced by its degree-q Taylor polynomial
* unbiased(q)  the degree-q polynomial evaluated on thinned data, with each
               monomial scaled by 1/p_u for every *distinct* index u it
               contains, so that its expectation over the thinning mask equals
               truncated(q) on the latent data.

The intercept acts as an always-observed coordinate (value 1, p = 1).

Evaluating the unbiased polynomial.  Summing over ordered d-tuples of indices,
a tuple in which index j appears e_j >= 1 times contributes
prod_j a_j^{e_j} z_j / p_j.  The exponential generating function of these
sums is prod_j (1 + (z_j/p_j)(exp(a_j x) - 1)); its logarithm is
sum_j z_j K(a_j x; p_j) with K(u; p) = log(1 + (e^u - 1)/p), a power series
whose degree-d coefficient is a_j^d kappa_d(p_j).  So per time step we form
the log-series from per-node power sums, exponentiate it as a truncated power
series, and read off d! [x^d].  Cost is O(T M q + T q^2) per evaluation.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, TaylorValidityWarning
from .model import EventMatrix, INV_PI, sigmoid, softplus
from .taylor import partition_coeffs

LOG2 = math.log(2.0)
MAX_DEGREE = 32
FAMILIES = ("complete", "truncated", "unbiased")


@dataclass(frozen=True)
class LossSpec:
    family: str = "complete"
    q: int | None = None
    p_hat: tuple | None = None
    include_intercept: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown loss family {self.family!r}")
        if self.family == "complete":
            object.__setattr__(self, "q", None)
        else:
            if self.q is None or int(self.q) < 2:
                raise ConfigurationError(f"{self.family} loss needs a degree q >= 2, got {self.q}")
            q = int(self.q)
            if q % 2:
                warnings.warn(f"odd degree {q} has the same polynomial as degree {q - 1}; using {q - 1}",
                              stacklevel=3)
                q -= 1
            if q > MAX_DEGREE:
                raise ConfigurationError(f"degree {q} exceeds the supported maximum {MAX_DEGREE}")
            object.__setattr__(self, "q", q)
        if self.family == "unbiased":
            if self.p_hat is None:
                raise ConfigurationError("unbiased loss requires p_hat")
            p = tuple(float(v) for v in np.atleast_1d(np.asarray(self.p_hat, dtype=float)))
            if any(not 0 < v <= 1 for v in p):
                raise ConfigurationError(f"p_hat entries must lie in (0, 1], got {p}")
            if min(p) <= INV_PI:
                warnings.warn(f"p_hat={min(p):.3f} <= 1/pi: the q -> infinity limit of the loss "
                              "diverges; the finite-degree loss is still defined", stacklevel=3)
            object.__setattr__(self, "p_hat", p)
        else:
            object.__setattr__(self, "p_hat", None)

    @classmethod
    def complete(cls, include_intercept=False):
        return cls("complete", include_intercept=include_intercept)

    @classmethod
    def truncated(cls, q, include_intercept=False):
        return cls("truncated", q, include_intercept=include_intercept)

    @classmethod
    def unbiased(cls, q, p_hat, include_intercept=False):
        return cls("unbiased", q, p_hat, include_intercept)

    def p_vector(self, M: int) -> np.ndarray:
        if self.p_hat is None:
            return np.ones(M)
        if len(self.p_hat) == 1:
            return np.full(M, self.p_hat[0])
        if len(self.p_hat) != M:
            raise ConfigurationError(f"p_hat has {len(self.p_hat)} entries for {M} nodes")
        return np.array(self.p_hat)

    def label(self) -> str:
        if self.family == "complete":
            return "complete"
        if self.family == "truncated":
            return f"truncated(q={self.q})"
        p = self.p_hat[0] if len(self.p_hat) == 1 else "vec"
        return f"unbiased(q={self.q}, p_hat={p})"


@dataclass(frozen=True)
class SuffStats:
    """Transition statistics of a binary matrix (raw counts, no p scaling).

    ``C[m]`` is sum_t Z_{t+1,m} Z_t and ``n_next[m]`` is sum_t Z_{t+1,m}.
    """

    s: np.ndarray
    G: np.ndarray
    C: np.ndarray
    n_next: np.ndarray
    T_eff: int

    @classmethod
    def from_events(cls, data) -> "SuffStats":
        z = _as_array(data).astype(float)
        prev, nxt = z[:, :-1], z[:, 1:]
        return cls(prev.sum(axis=1), prev @ prev.T, nxt @ prev.T, nxt.sum(axis=1), z.shape[1] - 1)


def _as_array(data) -> np.ndarray:
    arr = data.data if isinstance(data, EventMatrix) else np.asarray(data)
    if arr.ndim != 2:
        raise ConfigurationError(f"event data must be 2-D (nodes x time), got shape {arr.shape}")
    if arr.shape[1] < 2:
        raise ConfigurationError("need at least two time bins to form a transition")
    return arr


def _check_row(a, M: int, m: int) -> np.ndarray:
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape[0] != M:
        raise ConfigurationError(f"weight vector has length {a.shape[0]}, data has {M} nodes")
    if not 0 <= m < M:
        raise ConfigurationError(f"target row {m} out of range for {M} nodes")
    return a


def log_series_coeffs(p: np.ndarray, q: int) -> np.ndarray:
    """kappa_d(p) for d = 0..q: coefficients of log(1 + (e^x - 1)/p), one column per p."""
    w = 1.0 / np.asarray(p, dtype=float)
    s = np.empty((q + 1, w.size))
    s[0] = 1.0
    for e in range(1, q + 1):
        s[e] = w / math.factorial(e)
    ell = np.zeros_like(s)
    for n in range(1, q + 1):
        acc = sum(k * ell[k] * s[n - k] for k in range(1, n))
        ell[n] = s[n] - acc / n
    return ell


def _exp_series(L: np.ndarray) -> np.ndarray:
    """Row-wise exp of power series with zero constant term; L[:, k-1] is degree k."""
    n_rows, q = L.shape
    G = np.zeros((n_rows, q + 1))
    G[:, 0] = 1.0
    for n in range(1, q + 1):
        acc = np.zeros(n_rows)
        for k in range(1, n + 1):
            acc += k * L[:, k - 1] * G[:, n - k]
        G[:, n] = acc / n
    return G


class _CompleteRow:
    def __init__(self, x, m):
        self.prev = x[:, :-1].T.astype(float)
        self.target = x[m, 1:].astype(float)

    def value(self, a, nu):
        y = self.prev @ a + nu
        return float(np.mean(softplus(y) - self.target * y))

    def value_and_grad(self, a, nu):
        y = self.prev @ a + nu
        val = float(np.mean(softplus(y) - self.target * y))
        r = (sigmoid(y) - self.target) / y.size
        return val, self.prev.T @ r, float(r.sum())


class _PolyRow:
    """Degree-q truncation evaluated directly as a polynomial in y_t."""

    def __init__(self, x, m, q):
        self.prev = x[:, :-1].T.astype(float)
        self.target = x[m, 1:].astype(float)
        self.c = partition_coeffs(q).coeffs
        self.dc = np.polynomial.polynomial.polyder(self.c)

    def value(self, a, nu):
        y = self.prev @ a + nu
        return float(np.mean(np.polynomial.polynomial.polyval(y, self.c) - self.target * y))

    def value_and_grad(self, a, nu):
        P = np.polynomial.polynomial
        y = self.prev @ a + nu
        val = float(np.mean(P.polyval(y, self.c) - self.target * y))
        r = (P.polyval(y, self.dc) - self.target) / y.size
        return val, self.prev.T @ r, float(r.sum())


class _QuadraticRow:
    """Degree-2 unbiased loss as a quadratic form in (a, nu) built from SuffStats."""

    def __init__(self, stats: SuffStats, m, p):
        Te = stats.T_eff
        d = 1.0 / p
        self.s = stats.s * d / Te
        G = stats.G * np.outer(d, d) / Te
        np.fill_diagonal(G, self.s)
        self.G = G
        self.c = stats.C[m] * d / p[m] / Te
        self.n = stats.n_next[m] / p[m] / Te

    def value(self, a, nu):
        sa = self.s @ a
        return float(LOG2 + 0.5 * (sa + nu) + 0.125 * (a @ self.G @ a + 2 * nu * sa + nu * nu)
                     - self.c @ a - nu * self.n)

    def value_and_grad(self, a, nu):
        Ga = self.G @ a
        sa = self.s @ a
        val = LOG2 + 0.5 * (sa + nu) + 0.125 * (a @ Ga + 2 * nu * sa + nu * nu) - self.c @ a - nu * self.n
        ga = 0.5 * self.s + 0.25 * (Ga + nu * self.s) - self.c
        gnu = 0.5 + 0.25 * (sa + nu) - self.n
        return float(val), ga, float(gnu)


class _SeriesRow:
    """Degree-q unbiased loss via per-step exponentiated log-series (see module doc)."""

    def __init__(self, z, m, p, q):
        self.prev = z[:, :-1].T.astype(float)
        self.q = q
        T_eff = self.prev.shape[0]
        self.K = log_series_coeffs(p, q)[1:]  # q x M, row d-1 is degree d
        coeffs = partition_coeffs(q).coeffs
        self.fc = np.array([coeffs[n] * math.factorial(n) for n in range(q + 1)])
        next_w = z[m, 1:] / p[m]
        self.target_a = (next_w @ self.prev) / p / T_eff
        self.target_nu = float(next_w.mean())
        self.degrees = np.arange(1, q + 1)

    def _series(self, a, nu):
        coef = a[None, :] ** self.degrees[:, None] * self.K
        L = self.prev @ coef.T
        L[:, 0] += nu
        return _exp_series(L)

    def value(self, a, nu):
        G = self._series(a, nu)
        return float(np.mean(G @ self.fc) - self.target_a @ a - nu * self.target_nu)

    def value_and_grad(self, a, nu):
        q = self.q
        G = self._series(a, nu)
        val = float(np.mean(G @ self.fc) - self.target_a @ a - nu * self.target_nu)
        # H[:, d-1] = dE/dL_d = sum_{n>=d} f^(n)(0) G[:, n-d]
        H = np.empty((G.shape[0], q))
        for d in range(1, q + 1):
            H[:, d - 1] = G[:, : q - d + 1] @ self.fc[d:]
        ZH = self.prev.T @ H / G.shape[0]  # M x q
        dcoef = self.degrees[:, None] * a[None, :] ** (self.degrees[:, None] - 1) * self.K
        ga = np.einsum("dj,jd->j", dcoef, ZH) - self.target_a
        gnu = float(H[:, 0].mean()) - self.target_nu
        return val, ga, gnu


def row_objective(spec: LossSpec, data, m: int, stats: SuffStats | None = None, fast: bool = True):
    """Smooth part of the row-m objective with cached statistics.

    The returned object exposes ``value(a, nu)`` and ``value_and_grad(a, nu)``.
    With ``fast`` the degree-2 unbiased loss uses the quadratic-form path.
    """
    arr = _as_array(data)
    M = arr.shape[0]
    if not 0 <= m < M:
        raise ConfigurationError(f"target row {m} out of range for {M} nodes")
    if spec.family == "complete":
        return _CompleteRow(arr, m)
    if spec.family == "truncated":
        return _PolyRow(arr, m, spec.q)
    p = spec.p_vector(M)
    if spec.q == 2 and fast:
        return _QuadraticRow(stats if stats is not None else SuffStats.from_events(arr), m, p)
    return _SeriesRow(arr, m, p, spec.q)


def _warn_validity(a, intercept):
    radius = float(np.abs(a).sum() + abs(intercept))
    if radius > 1.0 + 1e-12:
        warnings.warn(f"|nu| + ||a||_1 = {radius:.3f} > 1: outside the Taylor validity region",
                      TaylorValidityWarning, stacklevel=3)


def loss_complete(a_m, intercept, x, m) -> float:
    arr = _as_array(x)
    a = _check_row(a_m, arr.shape[0], m)
    return _CompleteRow(arr, m).value(a, float(intercept))


def loss_truncated(a_m, intercept, x, m, q) -> float:
    spec = LossSpec.truncated(q)
    arr = _as_array(x)
    a = _check_row(a_m, arr.shape[0], m)
    _warn_validity(a, intercept)
    return _PolyRow(arr, m, spec.q).value(a, float(intercept))


def loss_unbiased_deg2(a_m, intercept, z, m, p_hat) -> float:
    spec = LossSpec.unbiased(2, p_hat)
    arr = _as_array(z)
    a = _check_row(a_m, arr.shape[0], m)
    return _QuadraticRow(SuffStats.from_events(arr), m, spec.p_vector(arr.shape[0])).value(a, float(intercept))


def loss_unbiased(a_m, intercept, z, m, p_hat, q) -> float:
    spec = LossSpec.unbiased(q, p_hat)
    arr = _as_array(z)
    a = _check_row(a_m, arr.shape[0], m)
    return _SeriesRow(arr, m, spec.p_vector(arr.shape[0]), spec.q).value(a, float(intercept))


def loss(spec: LossSpec, a_m, intercept, data, m) -> float:
    arr = _as_array(data)
    a = _check_row(a_m, arr.shape[0], m)
    nu = float(intercept) if spec.include_intercept else 0.0
    return row_objective(spec, arr, m).value(a, nu)


def grad(spec: LossSpec, a_m, intercept, data, m):
    """Analytic gradient of the row loss: ``(d/da, d/dnu)``.

    The intercept derivative is reported even when ``spec`` excludes the
    intercept (it is then evaluated at nu = 0).
    """
    arr = _as_array(data)
    a = _check_row(a_m, arr.shape[0], m)
    nu = float(intercept) if spec.include_intercept else 0.0
    _, ga, gnu = row_objective(spec, arr, m).value_and_grad(a, nu)
    return ga, gnu


def network_loss(spec: LossSpec, model, data) -> float:
    """Sum of the row losses over all target nodes."""
    arr = _as_array(data)
    stats = SuffStats.from_events(arr) if spec.family == "unbiased" else None
    nu = model.nu if spec.include_intercept else np.zeros(model.M)
    return sum(row_objective(spec, arr, m, stats).value(model.A[m], float(nu[m])) for m in range(model.M))


def brute_force_unbiased(a_m, intercept, z, m, p_hat, q, budget: float = 1e7) -> float:
    """Reference value by enumerating every ordered index tuple of every degree.

    Index 0 is the intercept (always observed); indices 1..M are the nodes.
    Only meant for small test problems.
    """
    arr = _as_array(z).astype(float)
    M, T = arr.shape
    a = _check_row(a_m, M, m)
    if q % 2:
        q -= 1
    p = np.ones(M) * np.asarray(p_hat, dtype=float)
    if (M + 1) ** q * T > budget:
        raise ConfigurationError(f"brute force needs {(M + 1) ** q * T:.3g} terms (budget {budget:.3g})")
    c = partition_coeffs(q).coeffs
    b = np.concatenate([[float(intercept)], a])
    log_p = np.concatenate([[0.0], np.log(p)])
    prev = np.vstack([np.ones(T - 1), arr[:, :-1]])  # (M+1) x T_eff
    missing = 1.0 - prev
    total = np.full(T - 1, c[0])
    for d in range(1, q + 1):
        tuples = np.array(list(itertools.product(range(M + 1), repeat=d)))
        coef = np.prod(b[tuples], axis=1)
        member = np.zeros((len(tuples), M + 1))
        member[np.arange(len(tuples))[:, None], tuples] = 1.0
        scale = np.exp(-member @ log_p)
        observed = (member @ missing) == 0  # tuples x T_eff
        total += c[d] * ((coef * scale) @ observed)
    target = arr[m, 1:] / p[m]
    linear = float(intercept) + (arr[:, :-1] / p[:, None]).T @ a
    return float(np.mean(total - target * linear))
