"""Exit criteria evaluated layer by layer while the model runs.

The ``*_step`` functions are the scalar rules.  The policy classes apply the
same arithmetic to a whole batch of still-active rows and plug into
:func:`ponderexit.model.forward_incremental` as its consumer, so every layer a
row does not need is never computed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import haltdist
from .gradcore import RngStream
from .model import ModelConfig, forward_incremental

POLICY_NAMES = ("q_exit", "sample", "expectation", "patience", "entropy", "fixed")


@dataclass(frozen=True)
class ExitPolicy:
    kind: str
    value: float | int | None = None

    def __post_init__(self):
        k, v = self.kind, self.value
        if k not in POLICY_NAMES:
            raise ValueError(f"unknown exit policy {k!r}; choose from {POLICY_NAMES}")
        if k == "expectation":
            if v is not None:
                raise ValueError("expectation takes no parameter")
            return
        if v is None:
            raise ValueError(f"policy {k!r} needs a parameter")
        if k == "q_exit" and not 0.0 < v <= 1.0:
            raise ValueError(f"q must lie in (0, 1], got {v!r}")
        if k in ("patience", "fixed") and (int(v) != v or v < 1):
            raise ValueError(f"{k} needs a positive integer, got {v!r}")
        if k == "entropy" and v < 0:
            raise ValueError(f"entropy threshold must be >= 0, got {v!r}")

    @property
    def early_exiting(self) -> bool:
        return self.kind != "expectation"

    def __str__(self):
        return self.kind if self.value is None else f"{self.kind}:{self.value}"


def parse_policy(text: str) -> ExitPolicy:
    """Parse ``name:value`` (or bare ``expectation``)."""
    name, sep, raw = text.strip().partition(":")
    if not sep:
        return ExitPolicy(name)
    if name in ("q_exit", "entropy"):
        return ExitPolicy(name, float(raw))
    if name in ("sample", "patience", "fixed"):
        return ExitPolicy(name, int(raw))
    return ExitPolicy(name, raw)


# scalar rules ----------------------------------------------------------------
# Each returns True to exit after layer i (1-based). Layer n always exits.

def q_exit_step(accumulated_cdf, lambda_i, survival, q, i, n):
    """Return ``(exit, cdf, survival)`` after folding in layer ``i``."""
    p_i = survival if i == n else lambda_i * survival
    cdf = accumulated_cdf + p_i
    return (i == n or cdf >= q), cdf, survival * (1.0 - lambda_i)


def sample_step(lambda_i, rng, i=None, n=None) -> bool:
    if i is not None and i == n:
        return True
    return bool(rng.random() < lambda_i)


def patience_step(current_prediction, previous_prediction, streak, t, i, n):
    """Return ``(exit, streak)``; the streak counts equal consecutive predictions."""
    if t > n:
        raise ValueError(f"patience t={t} exceeds depth n={n}")
    streak = streak + 1 if previous_prediction is not None and current_prediction == previous_prediction else 1
    return (streak >= t or i == n), streak


def prediction_entropy(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return -(np.exp(logp) * logp).sum(axis=-1)


def entropy_step(logits, threshold, i, n) -> bool:
    return i == n or bool(prediction_entropy(logits) < threshold)


# batched consumers -------------------------------------------------------------

class _Consumer:
    def __init__(self, batch, n):
        self.n = n
        self.exit_value = np.full(batch, np.nan)

    def __call__(self, layer, rows, logits, lambdas):
        raise NotImplementedError


class QExitConsumer(_Consumer):
    def __init__(self, batch, n, q):
        super().__init__(batch, n)
        self.q = q
        self.cdf = np.zeros(batch)
        self.survival = np.ones(batch)

    def __call__(self, layer, rows, logits, lambdas):
        p = lambdas * self.survival[rows]
        self.cdf[rows] = self.cdf[rows] + p
        self.survival[rows] = self.survival[rows] * (1.0 - lambdas)
        stop = self.cdf[rows] >= self.q
        self.exit_value[rows[stop]] = self.cdf[rows[stop]]
        return stop

    def finish(self, rows):
        # rows reaching layer n take the residual mass
        self.cdf[rows] = self.cdf[rows] + self.survival[rows]
        self.exit_value[rows] = self.cdf[rows]


class SampleConsumer(_Consumer):
    def __init__(self, batch, n, seed, example_ids):
        super().__init__(batch, n)
        self.streams = [RngStream(seed, int(e)) for e in example_ids]

    def __call__(self, layer, rows, logits, lambdas):
        return np.array([sample_step(lam, self.streams[r]) for r, lam in zip(rows, lambdas)], dtype=bool)


class PatienceConsumer(_Consumer):
    def __init__(self, batch, n, t):
        super().__init__(batch, n)
        if t > n:
            raise ValueError(f"patience t={t} exceeds depth n={n}")
        self.t = t
        self.prev = np.full(batch, -1)
        self.streak = np.zeros(batch, dtype=int)

    def __call__(self, layer, rows, logits, lambdas):
        pred = logits.argmax(axis=-1)
        same = pred == self.prev[rows]
        self.streak[rows] = np.where(same, self.streak[rows] + 1, 1)
        self.prev[rows] = pred
        return self.streak[rows] >= self.t


class EntropyConsumer(_Consumer):
    def __init__(self, batch, n, threshold):
        super().__init__(batch, n)
        self.threshold = threshold

    def __call__(self, layer, rows, logits, lambdas):
        ent = prediction_entropy(logits)
        self.exit_value[rows] = ent
        return ent < self.threshold


class FixedConsumer(_Consumer):
    def __init__(self, batch, n, k):
        super().__init__(batch, n)
        if k > n:
            raise ValueError(f"fixed depth {k} exceeds n={n}")
        self.k = k

    def __call__(self, layer, rows, logits, lambdas):
        return np.full(rows.shape, layer >= self.k)


class NeverStop(_Consumer):
    def __call__(self, layer, rows, logits, lambdas):
        return np.zeros(rows.shape, dtype=bool)


# running a policy ------------------------------------------------------------

@dataclass
class ExitDecision:
    exit_layer: int
    prediction: int
    layers_evaluated: int
    probs: np.ndarray
    cdf_at_exit: float | None = None


@dataclass
class BatchDecisions:
    exit_layer: np.ndarray
    prediction: np.ndarray
    layers_evaluated: np.ndarray
    probs: np.ndarray
    cdf_at_exit: np.ndarray
    early_exiting: bool = True

    def __len__(self):
        return len(self.exit_layer)

    def __getitem__(self, i) -> ExitDecision:
        cdf = self.cdf_at_exit[i]
        return ExitDecision(int(self.exit_layer[i]), int(self.prediction[i]), int(self.layers_evaluated[i]),
                            self.probs[i], None if np.isnan(cdf) else float(cdf))


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def make_consumer(policy: ExitPolicy, batch, n, example_ids=None, seed=0):
    if policy.kind == "q_exit":
        return QExitConsumer(batch, n, float(policy.value))
    if policy.kind == "sample":
        ids = np.arange(batch) if example_ids is None else example_ids
        return SampleConsumer(batch, n, int(policy.value) + int(seed), ids)
    if policy.kind == "patience":
        return PatienceConsumer(batch, n, int(policy.value))
    if policy.kind == "entropy":
        return EntropyConsumer(batch, n, float(policy.value))
    if policy.kind == "fixed":
        return FixedConsumer(batch, n, int(policy.value))
    return NeverStop(batch, n)


def run_policy_batch(config: ModelConfig, params, tokens, policy: ExitPolicy,
                     example_ids=None, seed: int = 0) -> BatchDecisions:
    """Evaluate a batch lazily under ``policy``.

    Sampling streams are keyed by ``(policy seed + seed, example id)`` so a
    row's draws do not depend on what else is in the batch.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    B, n = tokens.shape[0], config.n
    consumer = make_consumer(policy, B, n, example_ids, seed)
    trace = forward_incremental(config, params, tokens, consumer)
    exit_layer = trace.layers_evaluated.copy()
    rows = np.arange(B)
    if isinstance(consumer, QExitConsumer):
        consumer.finish(rows[exit_layer == n])
    if policy.kind == "expectation":
        probs = np.empty((B, config.num_classes))
        for b in rows:
            weights = haltdist.posterior_from_halting(trace.lambdas[b])
            probs[b] = haltdist.expectation_mixture(weights, _softmax(trace.logits[b]))
        # no single exit layer; report the depth that was paid for
        return BatchDecisions(exit_layer, probs.argmax(axis=-1), trace.layers_evaluated, probs,
                              np.full(B, np.nan), early_exiting=False)
    probs = _softmax(trace.logits[rows, exit_layer - 1])
    return BatchDecisions(exit_layer, probs.argmax(axis=-1), trace.layers_evaluated, probs,
                          consumer.exit_value.copy() if policy.kind == "q_exit" else np.full(B, np.nan))


def run_policy(config: ModelConfig, params, input_tokens, policy: ExitPolicy,
               example_id: int = 0, seed: int = 0) -> ExitDecision:
    tokens = np.asarray(input_tokens)
    if tokens.ndim != 1:
        raise ValueError("run_policy takes a single token sequence; use run_policy_batch for batches")
    return run_policy_batch(config, params, tokens[None, :], policy, [example_id], seed)[0]


def evaluate_policy(config: ModelConfig, params, dataset, policy: ExitPolicy,
                    seed: int = 0, batch_size: int = 256) -> BatchDecisions:
    """Run ``policy`` over a whole dataset; example ids are dataset row indices."""
    parts = []
    for start in range(0, len(dataset), batch_size):
        stop = min(start + batch_size, len(dataset))
        parts.append(run_policy_batch(config, params, dataset.tokens[start:stop], policy,
                                      np.arange(start, stop), seed))
    if not parts:
        empty = np.zeros(0, dtype=int)
        return BatchDecisions(empty, empty, empty, np.zeros((0, config.num_classes)), np.zeros(0),
                              policy.early_exiting)
    return BatchDecisions(
        np.concatenate([p.exit_layer for p in parts]),
        np.concatenate([p.prediction for p in parts]),
        np.concatenate([p.layers_evaluated for p in parts]),
        np.concatenate([p.probs for p in parts]),
        np.concatenate([p.cdf_at_exit for p in parts]),
        policy.early_exiting,
    )
