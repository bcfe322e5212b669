"""Ponder objective, Adam with a separate halting-network rate, and training drivers."""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import gradcore as gc
from . import haltdist
from .exitpolicy import ExitPolicy, evaluate_policy
from .gradcore import RngStream, Tensor
from .model import LayerTrace, ModelConfig, as_tensors, forward_full, init_params, is_lambda_param

OBJECTIVES = ("ponder", "vanilla", "pabee")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lambda_learning_rate: float | None = None  # None: same as learning_rate
    batch_size: int = 32
    beta: float = 0.5
    lambda_prior: float = 0.1
    patience_epochs: int = 5
    max_epochs: int = 50
    seed: int = 0
    kl_truncation_mode: str = "raw"
    truncation_mass: float = 0.95
    objective: str = "ponder"
    eval_q: float = 0.5
    eval_patience: int = 6

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lambda_learning_rate is not None and self.lambda_learning_rate < 0:
            raise ValueError("lambda_learning_rate must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0 < self.lambda_prior < 1:
            raise ValueError("lambda_prior must lie in (0, 1)")
        if self.kl_truncation_mode not in ("raw", "renormalized"):
            raise ValueError(f"unknown kl_truncation_mode {self.kl_truncation_mode!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience_epochs < 0:
            raise ValueError("batch_size and max_epochs must be >= 1, patience_epochs >= 0")

    @property
    def lambda_lr(self) -> float:
        return self.learning_rate if self.lambda_learning_rate is None else self.lambda_learning_rate

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# objectives ------------------------------------------------------------------

def _stack_columns(tensors):
    return gc.concat([gc.reshape(t, (t.shape[0], 1)) for t in tensors], axis=-1)


def _per_layer_nll(trace: LayerTrace, target) -> Tensor:
    cols = []
    for i, logits in enumerate(trace.logits, start=1):
        nll = gc.cross_entropy_with_logits(logits, target)
        if not np.all(np.isfinite(nll.value)):
            raise FloatingPointError(f"non-finite likelihood at layer {i}")
        cols.append(nll)
    return _stack_columns(cols)


def log_posterior(trace: LayerTrace) -> Tensor:
    """``(batch, n)`` log exit probabilities with the residual rule at layer n."""
    z = trace.halt_logits
    n = len(z)
    for i, zi in enumerate(z, start=1):
        if not np.all(np.isfinite(zi.value)):
            raise FloatingPointError(f"non-finite halting score at layer {i}")
    log_halt = _stack_columns([gc.log_sigmoid(zi) for zi in z])
    log_cont = _stack_columns([gc.log_sigmoid(-zi) for zi in z])
    last_off = np.ones(n)
    last_off[-1] = 0.0
    before = np.triu(np.ones((n, n)), k=1)  # before[j, i] = 1 when j < i
    return log_halt * last_off + gc.matmul(log_cont, Tensor(before))


def ponder_loss(trace: LayerTrace, target, beta: float, prior, mode: str = "raw",
                mass: float = 0.95) -> Tensor:
    """Negated variational bound, averaged over the batch.

    Per example: ``sum_i p(i|x) NLL_i + beta * KL_j(p(.|x) || prior)`` where the
    KL covers the first ``j`` layers and ``j`` is the posterior's 0.95-mass
    truncation index.
    """
    target = np.asarray(target)
    prior = np.asarray(prior.probs if isinstance(prior, haltdist.ExitDistribution) else prior, dtype=np.float64)
    n = len(trace)
    if prior.size != n:
        raise ValueError(f"prior has {prior.size} layers, trace has {n}")
    nll = _per_layer_nll(trace, target)
    logp = log_posterior(trace)
    p = gc.exp(logp)
    expected_nll = gc.sum(p * nll, axis=-1)
    if beta == 0:
        return gc.mean(expected_nll)

    pv = p.value
    j = np.argmax(np.cumsum(pv, axis=-1) >= mass, axis=-1)
    j = np.where(np.cumsum(pv, axis=-1)[:, -1] >= mass, j, n - 1)
    mask = (np.arange(n)[None, :] <= j[:, None]).astype(np.float64)
    log_prior = np.log(prior)
    if mode == "raw":
        kl = gc.sum(p * mask * (logp - log_prior), axis=-1)
    elif mode == "renormalized":
        z = gc.sum(p * mask, axis=-1, keepdims=True)
        log_z = gc.log(z)
        pn = p * mask * gc.exp(-log_z)
        log_prior_n = log_prior - np.log((prior * mask).sum(axis=-1, keepdims=True))
        kl = gc.sum(pn * (logp - log_z - log_prior_n), axis=-1)
    else:
        raise ValueError(f"unknown truncation mode {mode!r}")
    if not np.all(np.isfinite(kl.value)):
        raise FloatingPointError("non-finite KL term")
    return gc.mean(expected_nll + kl * beta)


def vanilla_loss(trace: LayerTrace, target) -> Tensor:
    """Cross-entropy of the last layer only (fixed-depth baseline)."""
    return gc.mean(gc.cross_entropy_with_logits(trace.logits[-1], np.asarray(target)))


def pabee_loss(trace: LayerTrace, target) -> Tensor:
    """Layer-index-weighted average of per-layer cross-entropies."""
    nll = _per_layer_nll(trace, np.asarray(target))
    n = len(trace)
    w = np.arange(1, n + 1, dtype=np.float64)
    return gc.mean(gc.sum(nll * (w / w.sum()), axis=-1))


def objective(trace, target, cfg: TrainConfig, prior) -> Tensor:
    if cfg.objective == "ponder":
        return ponder_loss(trace, target, cfg.beta, prior, cfg.kl_truncation_mode, cfg.truncation_mass)
    if cfg.objective == "vanilla":
        return vanilla_loss(trace, target)
    return pabee_loss(trace, target)


# optimiser -------------------------------------------------------------------

class Adam:
    """Adam without weight decay; halting-network parameters get their own rate."""

    def __init__(self, learning_rate, lambda_learning_rate=None, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = learning_rate
        self.lambda_lr = learning_rate if lambda_learning_rate is None else lambda_learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def rate_for(self, name: str) -> float:
        return self.lambda_lr if is_lambda_param(name) else self.lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        missing = sorted(set(params) - set(grads))
        if missing:
            raise KeyError(f"no gradient for parameters: {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        out = {}
        for name in sorted(params):
            g = grads[name]
            m = self.m.get(name)
            m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
            v = self.v.get(name)
            v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            rate = self.rate_for(name)
            if rate == 0.0:
                out[name] = params[name]
                continue
            out[name] = params[name] - rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def optimizer_step(params, grads, config: TrainConfig, state: Adam | None = None):
    """One Adam update; pass ``state`` back in to continue a run."""
    state = state or Adam(config.learning_rate, config.lambda_lr)
    return state.step(params, grads), state


# training loop ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    initial_loss: float = float("nan")
    wall_clock: float = 0.0
    params: dict | None = None
    model_config: ModelConfig | None = None
    train_config: TrainConfig | None = None

    @property
    def best_metric(self) -> float:
        return self.epochs[self.best_epoch - 1].val_metric

    @property
    def best_train_loss(self) -> float:
        return self.epochs[self.best_epoch - 1].train_loss


def stopping_point(metrics, patience: int) -> tuple[int, int]:
    """Replay the early-stopping rule; returns ``(epochs_run, best_epoch)``, both 1-based."""
    best, best_epoch, bad = -math.inf, 0, 0
    for epoch, m in enumerate(metrics, start=1):
        if m > best:
            best, best_epoch, bad = m, epoch, 0
        else:
            bad += 1
        if bad >= patience:
            return epoch, best_epoch
    return len(metrics), best_epoch


def validation_policy(cfg: TrainConfig, mcfg: ModelConfig) -> ExitPolicy:
    if cfg.objective == "ponder":
        return ExitPolicy("q_exit", cfg.eval_q)
    if cfg.objective == "pabee":
        return ExitPolicy("patience", min(cfg.eval_patience, mcfg.n))
    return ExitPolicy("fixed", mcfg.n)


def accuracy(mcfg, params, dataset, policy, seed=0) -> float:
    if len(dataset) == 0:
        return float("nan")
    dec = evaluate_policy(mcfg, params, dataset, policy, seed=seed)
    return float(np.mean(dec.prediction == dataset.labels))


def dataset_loss(mcfg, params, dataset, cfg: TrainConfig, batch_size=256) -> float:
    prior = haltdist.geometric_prior(cfg.lambda_prior, mcfg.n)
    total = 0.0
    with gc.no_grad():
        for s in range(0, len(dataset), batch_size):
            sl = slice(s, s + batch_size)
            trace = forward_full(mcfg, params, dataset.tokens[sl])
            total += objective(trace, dataset.labels[sl], cfg, prior).item() * len(dataset.labels[sl])
    return total / len(dataset)


def train(model_config: ModelConfig, train_config: TrainConfig, splits, log=None) -> TrainReport:
    """Train with epoch-wise validation and early stopping; keeps best-epoch parameters."""
    train_ds, dev_ds = splits["train"], splits["dev"]
    if len(train_ds) == 0 or len(dev_ds) == 0:
        raise ValueError("train and dev splits must both be non-empty")
    mcfg, cfg = model_config, train_config
    if cfg.objective == "ponder" and mcfg.lambda_init_prior is not None:
        mcfg = replace(mcfg, lambda_init_prior=cfg.lambda_prior)
    params = init_params(mcfg, seed=cfg.seed)
    prior = haltdist.geometric_prior(cfg.lambda_prior, mcfg.n)
    opt = Adam(cfg.learning_rate, cfg.lambda_lr)
    policy = validation_policy(cfg, mcfg)
    rng = RngStream(cfg.seed, 7)

    report = TrainReport(model_config=mcfg, train_config=cfg)
    report.initial_loss = dataset_loss(mcfg, params, train_ds, cfg)
    start = time.perf_counter()
    best, bad = -math.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.child(epoch).permutation(len(train_ds))
        losses, weights = [], []
        for b, s in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            leaves = as_tensors(params, requires_grad=True)
            trace = forward_full(mcfg, leaves, train_ds.tokens[idx], training=True, rng=rng.child(epoch, b))
            loss = objective(trace, train_ds.labels[idx], cfg, prior)
            grads = gc.backward(loss)
            for name in params:
                grads.setdefault(name, np.zeros_like(params[name]))
            params = opt.step(params, grads)
            losses.append(loss.item())
            weights.append(len(idx))
        metric = accuracy(mcfg, params, dev_ds, policy)
        rec = EpochRecord(epoch, float(np.average(losses, weights=weights)), metric, time.perf_counter() - t0)
        report.epochs.append(rec)
        if log:
            log(f"epoch {epoch}: loss {rec.train_loss:.4f} dev {metric:.4f} ({rec.seconds:.1f}s)")
        if metric > best:
            best, bad = metric, 0
            report.best_epoch = epoch
            report.params = {k: v.copy() for k, v in params.items()}
        else:
            bad += 1
        if bad >= cfg.patience_epochs:
            break
    report.wall_clock = time.perf_counter() - start
    return report


# grid search -----------------------------------------------------------------

@dataclass
class GridCell:
    config_id: str
    train_config: TrainConfig
    metrics: list[float]
    reports: list[TrainReport]

    @property
    def mean(self):
        return float(np.mean(self.metrics))

    @property
    def std(self):
        return float(np.std(self.metrics))

    @property
    def median(self):
        return float(np.median(self.metrics))


@dataclass
class GridResult:
    best: TrainConfig
    cells: list[GridCell]

    def rows(self):
        """Long-form rows: config_id, seed, epoch, split, metric, loss."""
        out = []
        for cell in self.cells:
            for rep in cell.reports:
                for rec in rep.epochs:
                    out.append({"config_id": cell.config_id, "seed": rep.train_config.seed, "epoch": rec.epoch,
                                "split": "train", "metric": "", "loss": rec.train_loss})
                    out.append({"config_id": cell.config_id, "seed": rep.train_config.seed, "epoch": rec.epoch,
                                "split": "dev", "metric": rec.val_metric, "loss": ""})
        return out

    def summary_rows(self):
        out = []
        for cell in self.cells:
            row = {"config_id": cell.config_id}
            row.update({k: v for k, v in cell.train_config.to_dict().items() if k != "seed"})
            row.update({"mean": cell.mean, "std": cell.std, "median": cell.median, "seeds": len(cell.metrics)})
            out.append(row)
        return out


def expand_grid(grid: dict) -> list[dict]:
    if not grid:
        raise ValueError("hyperparameter grid is empty")
    keys = sorted(grid)
    for k in keys:
        if not grid[k]:
            raise ValueError(f"grid axis {k!r} has no values")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def grid_search(model_config: ModelConfig, grid: dict, splits, seeds, base: TrainConfig | None = None,
                log=None) -> GridResult:
    """Exhaustive sweep; best cell by mean dev metric, ties to smaller lr then smaller batch."""
    base = base or TrainConfig()
    cells = []
    for k, values in enumerate(expand_grid(grid)):
        cfg = replace(base, **values)
        reports = [train(model_config, replace(cfg, seed=s), splits) for s in seeds]
        cell = GridCell(f"cell{k:03d}", cfg, [r.best_metric for r in reports], reports)
        if log:
            log(f"{cell.config_id} {values}: {cell.mean:.4f} +- {cell.std:.4f}")
        cells.append(cell)
    best = min(cells, key=lambda c: (-c.mean, c.train_config.learning_rate, c.train_config.batch_size))
    return GridResult(best.train_config, cells)


# desk-scale search ranges; rates are high because models train from scratch
DESK_GRID = {
    "learning_rate": [1e-3, 2e-3, 3e-3, 5e-3],
    "batch_size": [16, 32, 128],
    "lambda_learning_rate": [1e-3, 2e-3, 3e-3],
    "beta": [0.5],
}


# ablation --------------------------------------------------------------------

ABLATION_ROWS = (
    "vanilla", "ponder_sampling", "ponder_expectation", "qexit_base",
    "qexit_lambda_lr", "qexit_lambda_lr_3layer", "qexit_lambda_lr_concat", "qexit_full",
)

# row -> (trained variant, eval policy)
_ROW_SPECS = {
    "vanilla": ("vanilla", "fixed"),
    "ponder_sampling": ("base", "sample"),
    "ponder_expectation": ("base", "expectation"),
    "qexit_base": ("base", "q_exit"),
    "qexit_lambda_lr": ("lambda_lr", "q_exit"),
    "qexit_lambda_lr_3layer": ("lambda_lr_3layer", "q_exit"),
    "qexit_lambda_lr_concat": ("lambda_lr_concat", "q_exit"),
    "qexit_full": ("full", "q_exit"),
}


def ablation_variant(name: str, mcfg: ModelConfig, cfg: TrainConfig, lambda_lr: float):
    if name == "vanilla":
        return replace(mcfg, classifier_mode="shared"), replace(cfg, objective="vanilla")
    ponder = replace(cfg, objective="ponder")
    base_m = replace(mcfg, lambda_arch="one_layer", lambda_input="single_h", classifier_mode="shared")
    if name == "base":
        return base_m, replace(ponder, lambda_learning_rate=None)
    tuned = replace(ponder, lambda_learning_rate=lambda_lr)
    if name == "lambda_lr":
        return base_m, tuned
    if name == "lambda_lr_3layer":
        return replace(base_m, lambda_arch="three_layer"), tuned
    if name == "lambda_lr_concat":
        return replace(base_m, lambda_input="concat_h_prev"), tuned
    if name == "full":
        return replace(base_m, lambda_arch="three_layer", lambda_input="concat_h_prev"), tuned
    raise ValueError(f"unknown ablation variant {name!r}")


@dataclass
class AblationRow:
    config: str
    metrics: list[float]
    exit_depths: list[float]

    @property
    def mean(self):
        return float(np.mean(self.metrics))

    @property
    def std(self):
        return float(np.std(self.metrics))

    @property
    def median(self):
        return float(np.median(self.metrics))


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]
    models: dict = field(default_factory=dict)
    best_epochs: dict = field(default_factory=dict)

    def row(self, name) -> AblationRow:
        return next(r for r in self.rows if r.config == name)

    def as_records(self):
        return [{"config": r.config, "mean": r.mean, "std": r.std, "median": r.median,
                 "mean_exit_depth": float(np.mean(r.exit_depths))} for r in self.rows]


def run_ablation(splits, seeds, model_config: ModelConfig | None = None, train_config: TrainConfig | None = None,
                 lambda_learning_rate: float | None = None, rows=ABLATION_ROWS, eval_split: str = "test",
                 sample_seed: int = 1234, log=None) -> AblationTable:
    """Train each needed variant once per seed and score every requested row.

    The sampling, expectation and base Q-exit rows share one trained model per
    seed, so they differ only in the exit criterion.
    """
    mcfg = model_config or ModelConfig()
    cfg = train_config or TrainConfig()
    lam_lr = lambda_learning_rate if lambda_learning_rate is not None else cfg.learning_rate * 0.5
    eval_ds = splits[eval_split] if len(splits[eval_split]) else splits["dev"]
    unknown = set(rows) - set(ABLATION_ROWS)
    if unknown:
        raise ValueError(f"unknown ablation rows {sorted(unknown)}")
    needed = sorted({_ROW_SPECS[r][0] for r in rows})
    table = AblationTable([AblationRow(r, [], []) for r in rows], list(seeds))
    for seed in seeds:
        models, epochs = {}, {}
        for variant in needed:
            vm, vc = ablation_variant(variant, mcfg, replace(cfg, seed=seed), lam_lr)
            rep = train(vm, vc, splits)
            models[variant] = (rep.model_config, rep.params)
            epochs[variant] = rep.best_epoch
            if log:
                log(f"seed {seed} {variant}: best epoch {rep.best_epoch} dev {rep.best_metric:.4f}")
        table.models[seed] = models
        table.best_epochs[seed] = {r.config: epochs[_ROW_SPECS[r.config][0]] for r in table.rows}
        for row in table.rows:
            variant, kind = _ROW_SPECS[row.config]
            m, p = models[variant]
            policy = {
                "fixed": ExitPolicy("fixed", m.n),
                "sample": ExitPolicy("sample", sample_seed),
                "expectation": ExitPolicy("expectation"),
                "q_exit": ExitPolicy("q_exit", cfg.eval_q),
            }[kind]
            dec = evaluate_policy(m, p, eval_ds, policy, seed=seed)
            row.metrics.append(float(np.mean(dec.prediction == eval_ds.labels)))
            row.exit_depths.append(float(np.mean(dec.layers_evaluated)))
    return table
