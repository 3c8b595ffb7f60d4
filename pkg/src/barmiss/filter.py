"""Bootstrap particle filter for one-step-ahead event probabilities.

Particles are latent event vectors.  At week n the predictive probability is
the weighted average of sigmoid(nu + A x_{n-1}) over particles, computed
*before* the week-n observation is absorbed.  The observation model is the
thinning channel: P(z=1|x=1) = p, P(z=0|x=1) = 1-p, P(z=0|x=0) = 1.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .model import EventMatrix, MissingnessSpec, NetworkModel, make_rng, sigmoid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 1000
    p: MissingnessSpec = MissingnessSpec(1.0)
    resample_threshold: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 1:
            raise ConfigurationError("n_particles must be >= 1")
        if not 0 < self.resample_threshold <= 1:
            raise ConfigurationError("resample_threshold must lie in (0, 1]")


@dataclass
class FilterOutput:
    predictive: np.ndarray      # M x T
    predictive_se: np.ndarray   # per-entry importance-sampling standard error
    ess_trace: np.ndarray       # ESS after each weight update
    n_resamples: int
    n_reinjections: int

    @property
    def expected_event_total(self) -> float:
        return float(self.predictive.sum())

    def summary(self) -> dict:
        return {
            "expected_event_total": self.expected_event_total,
            "n_resamples": self.n_resamples,
            "n_reinjections": self.n_reinjections,
            "min_ess": float(self.ess_trace.min()) if self.ess_trace.size else None,
            "mean_ess": float(self.ess_trace.mean()) if self.ess_trace.size else None,
        }

    def to_csv(self, path, node_ids=None) -> None:
        M, T = self.predictive.shape
        node_ids = node_ids or [str(i) for i in range(M)]
        with open(path, "w") as fh:
            fh.write(",".join(["node"] + [str(t) for t in range(T)]) + "\n")
            for nid, row in zip(node_ids, self.predictive):
                fh.write(",".join([nid] + [repr(float(v)) for v in row]) + "\n")


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices from a single uniform offset."""
    n = weights.size
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def _log_obs_lik(particles: np.ndarray, z: np.ndarray, log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    # log_q = log(1-p); -inf entries encode impossible (x, z) pairs
    on = particles.astype(bool)
    seen = z.astype(bool)
    with np.errstate(invalid="ignore"):
        terms = np.where(seen, np.where(on, log_p, -np.inf), np.where(on, log_q, 0.0))
    return terms.sum(axis=1)


def filter_predict(model: NetworkModel, z: EventMatrix, cfg: FilterConfig, x0=None) -> FilterOutput:
    """Run the filter over the observed stream ``z`` (nodes x weeks).

    ``x0`` is the latent state before the first week (zeros by default).
    """
    M, T = z.M, z.T
    if model.M != M:
        raise ConfigurationError(f"model has {model.M} nodes, observations have {M}")
    p = cfg.p.p_vector(M)
    with np.errstate(divide="ignore"):
        log_p, log_q = np.log(p), np.log1p(-p)
    rng = make_rng(cfg.seed)
    N = cfg.n_particles
    x0 = np.zeros(M) if x0 is None else np.asarray(x0, dtype=float).reshape(-1)
    particles = np.tile(x0.astype(np.uint8), (N, 1))
    logw = np.zeros(N)
    A, nu = model.A, model.nu
    obs = z.data

    predictive = np.empty((M, T))
    pred_se = np.empty((M, T))
    ess_trace = np.empty(T)
    n_resamples = n_reinject = 0
    for n in range(T):
        w = np.exp(logw - logw.max())
        w /= w.sum()
        probs = sigmoid(nu + particles @ A.T)  # N x M
        mean = w @ probs
        predictive[:, n] = mean
        pred_se[:, n] = np.sqrt(np.maximum(w ** 2 @ (probs - mean) ** 2, 0.0))

        particles = (rng.random((N, M)) < probs).astype(np.uint8)
        zn = obs[:, n]
        ll = _log_obs_lik(particles, zn, log_p, log_q)
        new = logw + ll
        if not np.isfinite(new).any():
            # no particle explains the observation: force the contradicted coordinates
            n_reinject += 1
            log.info("week %d: all particle weights vanished; re-injecting observed state", n)
            particles[:, zn == 1] = 1
            particles[:, (zn == 0) & (p >= 1.0)] = 0
            new = logw + _log_obs_lik(particles, zn, log_p, log_q)
        logw = new - new.max()
        w = np.exp(logw)
        w /= w.sum()
        ess = 1.0 / np.sum(w ** 2)
        ess_trace[n] = ess
        if ess < cfg.resample_threshold * N:
            idx = systematic_resample(w, rng)
            particles = particles[idx]
            logw = np.zeros(N)
            n_resamples += 1
    return FilterOutput(np.clip(predictive, 0.0, 1.0), pred_se, ess_trace, n_resamples, n_reinject)


def expected_events(out: FilterOutput, scale: float = 1.0) -> float:
    """Total predicted events divided by ``scale`` (e.g. 0.75 for a naive 1/p correction)."""
    if scale <= 0:
        raise ConfigurationError("scale must be positive")
    return out.expected_event_total / scale


def exact_forward_predictive(model: NetworkModel, z: EventMatrix, p, x0=None) -> np.ndarray:
    """Exact one-step predictive by enumerating all 2^M latent states (small M only)."""
    M, T = z.M, z.T
    if M > 12:
        raise ConfigurationError("exact enumeration is limited to M <= 12")
    p = np.broadcast_to(np.asarray(p, dtype=float), (M,))
    states = ((np.arange(2 ** M)[:, None] >> np.arange(M)) & 1).astype(float)  # S x M
    on = sigmoid(model.nu + states @ model.A.T)  # S x M: P(x_next,i = 1 | state)
    trans = np.prod(np.where(states[None, :, :] == 1, on[:, None, :], 1 - on[:, None, :]), axis=2)
    x0 = np.zeros(M) if x0 is None else np.asarray(x0, dtype=float)
    belief = np.zeros(2 ** M)
    belief[int(np.dot(x0, 2 ** np.arange(M)))] = 1.0
    out = np.empty((M, T))
    for n in range(T):
        out[:, n] = belief @ on
        belief = belief @ trans
        zn = z.data[:, n]
        lik = np.prod(np.where(zn == 1, states * p, np.where(states == 1, 1 - p, 1.0)), axis=1)
        belief = belief * lik
        total = belief.sum()
        if total == 0:
            raise ConfigurationError(f"observation at week {n} has zero probability")
        belief /= total
    return out
