"""Bernoulli autoregressive (BAR) process: domain types, simulation, thinning.

The latent process is

    X_t ~ Bernoulli(sigmoid(nu + A X_{t-1}))      (coordinatewise)

and only Z_t = W_t * X_t is observed, with W_{t,i} ~ Bernoulli(p_i).
Event matrices are stored node-major, i.e. ``data[i, t]``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError

INV_PI = 1.0 / math.pi


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator (Philox) keyed by ``seed`` and optional stream keys.

    Independent streams for trials, rows, etc. are obtained by passing extra
    non-negative integer keys; the same (seed, keys) always gives the same stream.
    """
    if seed < 0 or any(k < 0 for k in keys):
        raise ConfigurationError("seeds and stream keys must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))


def sigmoid(x):
    """Logistic function 1/(1+exp(-x)), overflow-free for any finite input.

    NaN propagates to NaN. Scalars in, float out.
    """
    arr = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(arr))
    out = np.where(arr >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if np.ndim(x) == 0:
        return float(out)
    return out


def softplus(x):
    """log(1 + exp(x)), the Bernoulli log-partition function."""
    out = np.logaddexp(0.0, np.asarray(x, dtype=float))
    if np.ndim(x) == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class NetworkModel:
    """Weighted adjacency ``A`` (row m holds the weights into node m) and bias ``nu``."""

    A: np.ndarray
    nu: np.ndarray
    ball_constrained: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        nu = np.array(self.nu, dtype=float).reshape(-1)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigurationError(f"A must be square, got shape {A.shape}")
        if nu.shape[0] != A.shape[0]:
            raise ConfigurationError(f"nu has length {nu.shape[0]}, expected {A.shape[0]}")
        if self.ball_constrained:
            norms = np.abs(A).sum(axis=1)
            if np.any(norms > 1.0 + 1e-12):
                raise ConfigurationError(f"row l1 norms exceed 1: max {norms.max():.6g}")
        A.setflags(write=False)
        nu.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "nu", nu)

    @property
    def M(self) -> int:
        return self.A.shape[0]

    @classmethod
    def zeros(cls, M: int) -> "NetworkModel":
        return cls(np.zeros((M, M)), np.zeros(M))

    def row_l1_norms(self) -> np.ndarray:
        return np.abs(self.A).sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "A": self.A.tolist(),
            "nu": self.nu.tolist(),
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkModel":
        A = np.asarray(d["A"], dtype=float)
        M = int(d.get("M", A.shape[0]))
        A = A.reshape(M, M)
        nu = d.get("nu")
        nu = np.zeros(M) if nu is None else nu
        return cls(A, nu, meta=d.get("meta", {}))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "NetworkModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class EventMatrix:
    """Binary node-by-time matrix of event indicators."""

    data: np.ndarray
    node_ids: tuple = ()
    bin_width: str | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ConfigurationError(f"event matrix must be 2-D, got shape {data.shape}")
        if data.size and not np.isin(data, (0, 1)).all():
            raise ConfigurationError("event matrix entries must be 0 or 1")
        data = data.astype(np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        ids = tuple(str(i) for i in self.node_ids) if len(self.node_ids) else tuple(
            str(i) for i in range(data.shape[0]))
        if len(ids) != data.shape[0]:
            raise ConfigurationError(f"{len(ids)} node ids for {data.shape[0]} nodes")
        object.__setattr__(self, "node_ids", ids)

    @property
    def M(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    def columns(self, start: int, stop: int) -> "EventMatrix":
        return EventMatrix(self.data[:, start:stop], self.node_ids, self.bin_width)

    def permuted(self, order: Sequence[int]) -> "EventMatrix":
        order = list(order)
        return EventMatrix(self.data[order], [self.node_ids[i] for i in order], self.bin_width)

    def to_csv(self, path) -> None:
        """One row per time bin, header of node ids."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.node_ids)
            w.writerows(self.data.T.tolist())

    @classmethod
    def from_csv(cls, path, bin_width: str | None = None) -> "EventMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ConfigurationError(f"{path}: empty event file")
        header, body = rows[0], rows[1:]
        try:
            data = np.array([[int(c) for c in r] for r in body if r], dtype=np.int64)
        except ValueError as exc:
            raise ConfigurationError(f"{path}: non-integer cell ({exc})") from None
        if data.size == 0:
            data = np.zeros((0, len(header)), dtype=np.int64)
        if data.shape[1] != len(header):
            raise ConfigurationError(f"{path}: ragged rows")
        return cls(data.T, header, bin_width)


@dataclass(frozen=True)
class MissingnessSpec:
    """Observation probabilities ``p`` and the estimate ``p_hat`` fed to the loss.

    Both accept a scalar (broadcast to every node) or a per-node vector.
    """

    p: np.ndarray
    p_hat: np.ndarray | None = None

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.p, dtype=float))
        p_hat = p if self.p_hat is None else np.atleast_1d(np.asarray(self.p_hat, dtype=float))
        for name, v in (("p", p), ("p_hat", p_hat)):
            if v.ndim != 1 or np.any(~(v > 0)) or np.any(v > 1):
                raise ConfigurationError(f"{name} entries must lie in (0, 1], got {v}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "p_hat", p_hat)
        if self.below_threshold:
            warnings.warn(
                f"min(p_hat)={p_hat.min():.3f} <= 1/pi: the infinite-degree loss is undefined "
                "here; finite-degree truncations remain well defined",
                stacklevel=3,
            )

    @property
    def below_threshold(self) -> bool:
        return bool(self.p_hat.min() <= INV_PI)

    def p_vector(self, M: int) -> np.ndarray:
        return _broadcast(self.p, M, "p")

    def p_hat_vector(self, M: int) -> np.ndarray:
        return _broadcast(self.p_hat, M, "p_hat")


def _broadcast(v: np.ndarray, M: int, name: str) -> np.ndarray:
    if v.shape[0] == 1:
        return np.full(M, v[0])
    if v.shape[0] != M:
        raise ConfigurationError(f"{name} has {v.shape[0]} entries for {M} nodes")
    return v.copy()


def simulate_bar(model: NetworkModel, T: int, x0=None, seed: int = 0, burn_in: int = 0) -> EventMatrix:
    """Draw ``T`` steps of the latent process started from ``x0`` (zeros by default).

    ``burn_in`` extra steps are drawn first and discarded.
    """
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    M = model.M
    x = np.zeros(M) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    if x.shape[0] != M:
        raise ConfigurationError(f"x0 has length {x.shape[0]}, model has {M} nodes")
    rng = make_rng(seed)
    out = np.empty((M, T), dtype=np.uint8)
    A, nu = model.A, model.nu
    for t in range(-burn_in, T):
        x = (rng.random(M) < sigmoid(nu + A @ x)).astype(float)
        if t >= 0:
            out[:, t] = x
    return EventMatrix(out)


def apply_missingness(x: EventMatrix, spec: MissingnessSpec, seed: int = 0):
    """Thin ``x`` with independent Bernoulli(p_i) masks.

    Returns ``(z, w)``; the mask ``w`` exists for test oracles only.
    """
    p = spec.p_vector(x.M)
    rng = make_rng(seed)
    w = (rng.random(x.data.shape) < p[:, None]).astype(np.uint8)
    z = w & x.data
    return (EventMatrix(z, x.node_ids, x.bin_width), EventMatrix(w, x.node_ids, x.bin_width))
