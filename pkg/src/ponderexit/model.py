"""Adaptive-depth encoder: one weight-shared step cell unrolled up to ``n`` times.

After every application of the step cell the first-token vector of the hidden
state is pooled and handed to the classifier and to the halting network.
Parameters live in a flat ``dict[str, np.ndarray]`` so they can be stored,
checked and updated without any module machinery.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .gradcore import RngStream, Tensor

CHECKPOINT_MAGIC = "PONDEREXIT-CKPT"
CHECKPOINT_VERSION = 1

LAMBDA_ARCHS = ("one_layer", "three_layer")
LAMBDA_INPUTS = ("single_h", "concat_h_prev")
CLASSIFIER_MODES = ("shared", "per_layer")


@dataclass
class ModelConfig:
    vocab_size: int = 32
    max_seq_len: int = 32
    d_model: int = 64
    n_heads: int = 2
    d_ff: int = 128
    max_layers: int = 12
    num_classes: int = 2
    lambda_arch: str = "one_layer"
    lambda_input: str = "single_h"
    classifier_mode: str = "shared"
    classifier_dropout: float = 0.1
    # bias the halting head so that initial halting probabilities sit at the prior
    lambda_init_prior: float | None = 0.1
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.max_layers < 1:
            raise ValueError("max_layers must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.lambda_arch not in LAMBDA_ARCHS:
            raise ValueError(f"lambda_arch must be one of {LAMBDA_ARCHS}, got {self.lambda_arch!r}")
        if self.lambda_input not in LAMBDA_INPUTS:
            raise ValueError(f"lambda_input must be one of {LAMBDA_INPUTS}, got {self.lambda_input!r}")
        if self.classifier_mode not in CLASSIFIER_MODES:
            raise ValueError(f"classifier_mode must be one of {CLASSIFIER_MODES}, got {self.classifier_mode!r}")

    @property
    def n(self) -> int:
        return self.max_layers

    @property
    def lambda_widths(self) -> list[int]:
        d_in = self.d_model * (2 if self.lambda_input == "concat_h_prev" else 1)
        if self.lambda_arch == "one_layer":
            return [d_in, 1]
        return [d_in, self.d_model, max(self.d_model // 2, 1), 1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_params(config: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    rng = RngStream(config.init_seed if seed is None else seed, 17)
    d, f, C = config.d_model, config.d_ff, config.num_classes

    def dense(fan_in, fan_out):
        return rng.normal(1.0 / math.sqrt(fan_in), (fan_in, fan_out))

    p = {
        "tok_emb": rng.normal(0.5, (config.vocab_size, d)),
        "pos_emb": rng.normal(0.5, (config.max_seq_len, d)),
        "ln1_g": np.ones(d), "ln1_b": np.zeros(d),
        "w_qkv": dense(d, 3 * d), "b_qkv": np.zeros(3 * d),
        "w_o": dense(d, d) / math.sqrt(2), "b_o": np.zeros(d),
        "ln2_g": np.ones(d), "ln2_b": np.zeros(d),
        "w_ff1": dense(d, f), "b_ff1": np.zeros(f),
        "w_ff2": dense(f, d) / math.sqrt(2), "b_ff2": np.zeros(d),
        "pool_ln_g": np.ones(d), "pool_ln_b": np.zeros(d),
    }
    if config.classifier_mode == "shared":
        p["cls_w"] = dense(d, C)
        p["cls_b"] = np.zeros(C)
    else:
        p["cls_w"] = np.stack([dense(d, C) for _ in range(config.n)])
        p["cls_b"] = np.zeros((config.n, C))

    widths = config.lambda_widths
    for k, (a, b) in enumerate(zip(widths[:-1], widths[1:]), start=1):
        p[f"lam_w{k}"] = dense(a, b)
        p[f"lam_b{k}"] = np.zeros(b)
    last = len(widths) - 1
    if config.lambda_init_prior is not None:
        p[f"lam_w{last}"] *= 0.1
        prior = config.lambda_init_prior
        p[f"lam_b{last}"][:] = math.log(prior / (1.0 - prior))
    return p


def is_lambda_param(name: str) -> bool:
    return name.startswith("lam_")


def param_count(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def as_tensors(params, requires_grad=False) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=requires_grad, name=k)
            for k, v in params.items()}


# building blocks -------------------------------------------------------------

def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError(f"expected a non-empty (batch, seq_len) token array, got shape {tokens.shape}")
    if tokens.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len={config.max_seq_len}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError(f"token ids must be integers, got dtype {tokens.dtype}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token id out of range [0, {config.vocab_size}): "
                         f"found {tokens.min()}..{tokens.max()}")
    return tokens


def embed(config: ModelConfig, P: dict[str, Tensor], tokens: np.ndarray) -> Tensor:
    T = tokens.shape[1]
    return gc.embedding_lookup(P["tok_emb"], tokens) + gc.index(P["pos_emb"], slice(0, T))


def step_cell(config: ModelConfig, P: dict[str, Tensor], h: Tensor) -> Tensor:
    """Pre-norm self-attention then feed-forward, both residual."""
    B, T, d = h.shape
    H = config.n_heads
    dh = d // H
    x = gc.layer_norm(h, P["ln1_g"], P["ln1_b"])
    qkv = gc.reshape(x @ P["w_qkv"] + P["b_qkv"], (B, T, 3, H, dh))
    qkv = gc.transpose(qkv, (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = gc.matmul(q, gc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = gc.matmul(gc.softmax(scores), v)
    att = gc.reshape(gc.transpose(att, (0, 2, 1, 3)), (B, T, d))
    h = h + (att @ P["w_o"] + P["b_o"])
    x = gc.layer_norm(h, P["ln2_g"], P["ln2_b"])
    ff = gc.relu(x @ P["w_ff1"] + P["b_ff1"]) @ P["w_ff2"] + P["b_ff2"]
    return h + ff


def pool(P: dict[str, Tensor], h: Tensor) -> Tensor:
    """First-token vector of ``h``, layer-normalised."""
    return gc.layer_norm(h[:, 0, :], P["pool_ln_g"], P["pool_ln_b"])


def classify(params, pooled_hidden, layer_index: int, classifier_mode: str = "shared") -> Tensor:
    """Logits for one layer; ``layer_index`` is 1-based and only used per layer."""
    P = as_tensors(params)
    pooled_hidden = gc._lift(pooled_hidden)
    if classifier_mode == "shared":
        return pooled_hidden @ P["cls_w"] + P["cls_b"]
    if classifier_mode != "per_layer":
        raise ValueError(f"unknown classifier mode {classifier_mode!r}")
    n = P["cls_w"].shape[0]
    if not 1 <= layer_index <= n:
        raise ValueError(f"layer index {layer_index} outside [1, {n}]")
    return pooled_hidden @ P["cls_w"][layer_index - 1] + P["cls_b"][layer_index - 1]


def halting_logit(config: ModelConfig, params, pooled: Tensor, pooled_prev: Tensor | None) -> Tensor:
    """Pre-sigmoid halting score of shape ``(batch,)``."""
    P = as_tensors(params)
    x = gc._lift(pooled)
    if config.lambda_input == "concat_h_prev":
        x = gc.concat([x, gc._lift(pooled_prev)], axis=-1)
    depth = len(config.lambda_widths) - 1
    for k in range(1, depth + 1):
        x = x @ P[f"lam_w{k}"] + P[f"lam_b{k}"]
        if k < depth:
            x = gc.tanh(x)
    return gc.reshape(x, x.shape[:-1])


def halting(config: ModelConfig, params, pooled, pooled_prev=None) -> np.ndarray:
    """Halting probabilities for injected pooled states (no graph is built)."""
    with gc.no_grad():
        z = halting_logit(config, params, Tensor(pooled), None if pooled_prev is None else Tensor(pooled_prev))
    return gc._sigmoid(np.atleast_1d(z.value))


# forward passes --------------------------------------------------------------

@dataclass
class LayerTrace:
    """Per-layer outputs of one unrolled forward pass (layer ``i`` at index ``i-1``)."""

    pooled: list[Tensor]
    logits: list[Tensor]
    halt_logits: list[Tensor]
    pooled_input: Tensor

    def __len__(self):
        return len(self.logits)

    @property
    def lambdas(self) -> np.ndarray:
        """``(batch, n)`` halting probabilities."""
        return gc._sigmoid(np.stack([z.value for z in self.halt_logits], axis=-1))

    @property
    def logits_array(self) -> np.ndarray:
        """``(batch, n, num_classes)``."""
        return np.stack([z.value for z in self.logits], axis=1)

    @property
    def pooled_array(self) -> np.ndarray:
        return np.stack([z.value for z in self.pooled], axis=1)


class StepCounter:
    """Counts step-cell applications, one per example row."""

    def __init__(self):
        self.rows = 0
        self.calls = 0

    def reset(self):
        self.rows = self.calls = 0


STEP_COUNTER = StepCounter()


def _apply_step(config, P, h):
    STEP_COUNTER.calls += 1
    STEP_COUNTER.rows += h.shape[0]
    return step_cell(config, P, h)


def _layer_outputs(config, P, h, layer, prev_pooled, training, rng):
    pooled = pool(P, h)
    cls_in = gc.dropout(pooled, config.classifier_dropout, rng, training)
    logits = classify(P, cls_in, layer, config.classifier_mode)
    z = halting_logit(config, P, pooled, prev_pooled)
    return pooled, logits, z


def forward_full(config: ModelConfig, params, input_tokens, training: bool = False,
                 rng: RngStream | None = None) -> LayerTrace:
    """Unroll all ``n`` layers and record pooled state, logits and halting score per layer."""
    tokens = _check_tokens(config, input_tokens)
    if training and config.classifier_dropout > 0 and rng is None:
        raise ValueError("training mode with dropout needs an rng")
    P = as_tensors(params)
    h = embed(config, P, tokens)
    prev = pool(P, h)
    trace = LayerTrace([], [], [], prev)
    for layer in range(1, config.n + 1):
        h = _apply_step(config, P, h)
        pooled, logits, z = _layer_outputs(config, P, h, layer, prev, training, rng)
        trace.pooled.append(pooled)
        trace.logits.append(logits)
        trace.halt_logits.append(z)
        prev = pooled
    return trace


@dataclass
class PartialTrace:
    """Outputs of a lazily evaluated batch; entries past a row's stop layer are NaN."""

    pooled: np.ndarray
    logits: np.ndarray
    lambdas: np.ndarray
    layers_evaluated: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


def forward_incremental(config: ModelConfig, params, input_tokens, consumer) -> PartialTrace:
    """Apply the step cell layer by layer, only to rows the consumer has not stopped.

    ``consumer(layer, rows, logits, lambdas)`` receives the 1-based layer, the
    indices of the still-active rows and their ``(b, C)`` logits and ``(b,)``
    halting probabilities, and returns a boolean stop mask over those rows.
    Every row stops at layer ``n`` regardless.
    """
    tokens = _check_tokens(config, input_tokens)
    B, n = tokens.shape[0], config.n
    out = PartialTrace(
        pooled=np.full((B, n, config.d_model), np.nan),
        logits=np.full((B, n, config.num_classes), np.nan),
        lambdas=np.full((B, n), np.nan),
        layers_evaluated=np.zeros(B, dtype=int),
    )
    with gc.no_grad():
        P = as_tensors(params)
        h = embed(config, P, tokens)
        prev = pool(P, h)
        rows = np.arange(B)
        for layer in range(1, n + 1):
            h = _apply_step(config, P, h)
            out.layers_evaluated[rows] += 1
            pooled, logits, z = _layer_outputs(config, P, h, layer, prev, False, None)
            lam = gc._sigmoid(np.atleast_1d(z.value))
            out.pooled[rows, layer - 1] = pooled.value
            out.logits[rows, layer - 1] = logits.value
            out.lambdas[rows, layer - 1] = lam
            if layer == n:
                break
            stop = np.asarray(consumer(layer, rows, logits.value, lam), dtype=bool)
            if stop.shape != rows.shape:
                raise ValueError(f"consumer returned mask of shape {stop.shape}, expected {rows.shape}")
            keep = ~stop
            if not keep.any():
                break
            if not keep.all():
                h = Tensor(h.value[keep])
                pooled = Tensor(pooled.value[keep])
                rows = rows[keep]
            prev = pooled
    return out


# checkpoints -----------------------------------------------------------------

def save_checkpoint(path, config: ModelConfig, params: dict[str, np.ndarray], meta: dict | None = None):
    """Write config, metadata and named parameter arrays to one ``.npz`` file."""
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    arrays["__magic__"] = np.array(CHECKPOINT_MAGIC)
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__config__"] = np.array(json.dumps(config.to_dict(), sort_keys=True))
    arrays["__meta__"] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        if "__magic__" not in z.files or str(z["__magic__"]) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a ponderexit checkpoint")
        version = int(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(json.loads(str(z["__config__"])))
        meta = json.loads(str(z["__meta__"]))
        params = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    return config, params, meta
