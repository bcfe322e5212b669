"""Exit-layer distributions induced by per-layer halting probabilities.

Everything here is plain numpy and free of autodiff: these functions are the
reference arithmetic used by the exit policies, the harness and the tests.
Layer indices are 1-based in the public API, matching how exit layers are
reported everywhere else in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Above this depth the products are accumulated in log space.
LOG_SPACE_DEPTH = 32


@dataclass(frozen=True)
class ExitDistribution:
    """Probability mass over exit layers ``1..n``."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError(f"expected a non-empty 1-d distribution, got shape {probs.shape}")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("exit probabilities must be finite and non-negative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"exit probabilities sum to {probs.sum()!r}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def n(self) -> int:
        return self.probs.size

    def __len__(self):
        return self.probs.size

    def __getitem__(self, i):
        return self.probs[i]


def _as_dist(p) -> ExitDistribution:
    return p if isinstance(p, ExitDistribution) else ExitDistribution(np.asarray(p, dtype=np.float64))


def _check_halting(lambdas) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim != 1 or lam.size == 0:
        raise ValueError("halting vector must be a non-empty 1-d sequence")
    head = lam[:-1]
    bad = np.flatnonzero(~((head > 0) & (head < 1)))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"halting probability at layer {i + 1} is {head[i]!r}; must lie in (0, 1)")
    return lam


def posterior_from_halting(lambdas: Sequence[float]) -> ExitDistribution:
    """Exit distribution ``p_i = lam_i * prod_{j<i} (1 - lam_j)``.

    The last layer takes the remaining mass, i.e. its halting probability is
    treated as 1 whatever value was supplied.
    """
    lam = _check_halting(lambdas)
    n = lam.size
    if n > LOG_SPACE_DEPTH:
        log_survival = np.concatenate([[0.0], np.cumsum(np.log1p(-lam[:-1]))])
        log_halt = np.append(np.log(lam[:-1]), 0.0)
        probs = np.exp(log_survival + log_halt)
    else:
        probs = np.empty(n)
        survival = 1.0
        for i in range(n - 1):
            probs[i] = lam[i] * survival
            survival *= 1.0 - lam[i]
        probs[n - 1] = survival
    return ExitDistribution(probs)


def geometric_prior(lambda_prior: float, n: int) -> ExitDistribution:
    """Geometric prior truncated at ``n`` layers with the tail folded into layer n."""
    if not 0.0 < lambda_prior < 1.0:
        raise ValueError(f"prior parameter must lie in (0, 1), got {lambda_prior!r}")
    if int(n) != n or n < 1:
        raise ValueError(f"depth must be a positive integer, got {n!r}")
    n = int(n)
    return posterior_from_halting(np.full(n, float(lambda_prior)))


def cdf(p) -> np.ndarray:
    return np.cumsum(_as_dist(p).probs)


def truncation_index(p, mass: float = 0.95) -> int:
    """Smallest 1-based ``j`` whose cumulative mass reaches ``mass``."""
    c = cdf(p)
    hits = np.flatnonzero(c >= mass)
    return int(hits[0]) + 1 if hits.size else c.size


def kl_truncated(p, prior, j: int, mode: str = "raw") -> float:
    """KL divergence in nats restricted to the first ``j`` layers.

    ``mode="raw"`` sums the first ``j`` terms of the full KL as they are;
    ``mode="renormalized"`` rescales both prefixes to unit mass first.
    """
    p = np.asarray(_as_dist(p).probs if isinstance(p, ExitDistribution) else p, dtype=np.float64)
    q = np.asarray(_as_dist(prior).probs if isinstance(prior, ExitDistribution) else prior, dtype=np.float64)
    if j < 1 or j > min(p.size, q.size):
        raise ValueError(f"truncation index {j} outside [1, {min(p.size, q.size)}]")
    p, q = p[:j], q[:j]
    if mode == "renormalized":
        p = p / p.sum()
        q = q / q.sum()
    elif mode != "raw":
        raise ValueError(f"unknown truncation mode {mode!r}")
    support = p > 0
    if np.any(support & (q <= 0)):
        i = int(np.flatnonzero(support & (q <= 0))[0])
        raise ValueError(f"prior has zero mass at layer {i + 1} where the posterior does not")
    return float(np.sum(p[support] * np.log(p[support] / q[support])))


def sample_exit_index(p, rng) -> int:
    """Draw a 1-based exit layer from ``p`` using the caller's generator."""
    c = cdf(p)
    u = rng.random()
    i = int(np.searchsorted(c, u, side="right"))
    return min(i, c.size - 1) + 1


def expected_exit_depth(p) -> float:
    probs = _as_dist(p).probs
    return float(np.dot(np.arange(1, probs.size + 1), probs))


def expectation_mixture(weights, per_layer_values) -> np.ndarray:
    """Probability-weighted average of per-layer vectors (closed-form expectation)."""
    w = _as_dist(weights).probs if isinstance(weights, ExitDistribution) else np.asarray(weights, dtype=np.float64)
    values = np.asarray(per_layer_values, dtype=np.float64)
    if values.shape[0] != w.size:
        raise ValueError(f"got {w.size} weights for {values.shape[0]} per-layer values")
    return np.tensordot(w, values, axes=1)
