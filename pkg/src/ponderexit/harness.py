"""Experiment drivers that turn trained models into plot-ready CSV files.

Every writer here is deterministic: rows come out in a fixed sort order and
floats are written with ``repr`` so two runs with the same inputs produce
byte-identical files.  Speedup is the ratio of layers, ``n / mean exit depth``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__, haltdist
from .benchdata import Dataset
from .exitpolicy import BatchDecisions, ExitPolicy, evaluate_policy, parse_policy
from .model import ModelConfig, forward_full
from .training import TrainConfig, run_ablation, train

EVAL_COLUMNS = ("example_id", "difficulty", "exit_layer", "layers_evaluated", "prediction", "label", "correct")
SUMMARY_COLUMNS = ("policy", "examples", "metric", "mean_exit_depth", "speedup", "non_early_exit", "wall_clock")
SWEEP_Q_COLUMNS = ("q", "mean_metric", "std_metric", "mean_exit_depth", "speedup")
LONG_COLUMNS = ("config_id", "seed", "epoch", "split", "metric", "loss")
SPEED_COLUMNS = ("family", "policy", "parameter", "speedup", "metric_mean", "metric_std", "mean_exit_depth")


# csv / manifest --------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return "" if v is None else str(v)


def csv_text(rows, columns) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(rows, columns))
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_manifest(out_dir, command: str, config, seed, outputs=(), extra=None) -> Path:
    """Record what produced the files in ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "outputs": sorted(str(o) for o in outputs),
        "versions": {"ponderexit": __version__, "python": platform.python_version(), "numpy": np.__version__},
        "argv": sys.argv[1:],
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


# evaluation ------------------------------------------------------------------

def speedup(n: int, mean_exit_depth: float) -> float:
    return float(n) / float(mean_exit_depth)


def eval_rows(decisions: BatchDecisions, dataset: Dataset) -> list[dict]:
    rows = []
    for i in range(len(dataset)):
        pred, label = int(decisions.prediction[i]), int(dataset.labels[i])
        rows.append({"example_id": i, "difficulty": int(dataset.difficulty[i]),
                     "exit_layer": int(decisions.exit_layer[i]),
                     "layers_evaluated": int(decisions.layers_evaluated[i]),
                     "prediction": pred, "label": label, "correct": int(pred == label)})
    return rows


def summarize(rows, n: int, policy: ExitPolicy, wall_clock: float | None = None) -> dict:
    """Summary row recomputed from per-example rows.

    The expectation policy pays for every layer, so its speedup is 1.0 and it
    is flagged as not early-exiting.
    """
    if not rows:
        raise ValueError("cannot summarise an empty evaluation")
    depth = float(np.mean([r["layers_evaluated"] for r in rows]))
    return {"policy": str(policy), "examples": len(rows),
            "metric": float(np.mean([r["correct"] for r in rows])),
            "mean_exit_depth": depth,
            "speedup": 1.0 if not policy.early_exiting else speedup(n, depth),
            "non_early_exit": int(not policy.early_exiting),
            "wall_clock": wall_clock}


def evaluate(config: ModelConfig, params, dataset: Dataset, policy: ExitPolicy | str, seed: int = 0):
    """Return ``(per_example_rows, summary)`` for ``policy`` on ``dataset``."""
    policy = parse_policy(policy) if isinstance(policy, str) else policy
    t0 = time.perf_counter()
    dec = evaluate_policy(config, params, dataset, policy, seed=seed)
    rows = eval_rows(dec, dataset)
    return rows, summarize(rows, config.n, policy, time.perf_counter() - t0)


def write_eval(out_dir, rows, summary, stem="eval"):
    """Per-example CSV plus a one-row summary CSV.  Wall clock stays out of the
    summary file so repeated runs compare byte for byte; it goes to timing.json."""
    out = Path(out_dir)
    a = write_csv(out / f"{stem}.csv", rows, EVAL_COLUMNS)
    b = write_csv(out / f"{stem}_summary.csv", [summary], SUMMARY_COLUMNS[:-1])
    (out / f"{stem}_timing.json").write_text(json.dumps({"wall_clock": summary.get("wall_clock")}) + "\n")
    return a, b


# sweeps ----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    seeds: tuple = (0,)
    policy_family: str = "q_exit"

    def __post_init__(self):
        if self.axis not in ("q", "lambda_prior", "patience"):
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if len(self.values) == 0:
            raise ValueError("sweep needs at least one value")
        if len(self.seeds) == 0:
            raise ValueError("sweep needs at least one seed")


def sweep_q(models, dataset: Dataset, qs) -> list[dict]:
    """One row per q; mean and std of the metric over the given models."""
    if not models:
        raise ValueError("sweep-q needs at least one trained model")
    SweepSpec("q", tuple(qs), tuple(range(len(models))))
    rows = []
    for q in sorted(float(v) for v in qs):
        metrics, depths = [], []
        for config, params in models:
            dec = evaluate_policy(config, params, dataset, ExitPolicy("q_exit", q))
            metrics.append(float(np.mean(dec.prediction == dataset.labels)))
            depths.append(float(np.mean(dec.layers_evaluated)))
        depth = float(np.mean(depths))
        rows.append({"q": q, "mean_metric": float(np.mean(metrics)), "std_metric": float(np.std(metrics)),
                     "mean_exit_depth": depth, "speedup": speedup(models[0][0].n, depth)})
    return rows


def averaged_posterior(config: ModelConfig, params, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Mean over the dataset of each example's exit distribution."""
    total = np.zeros(config.n)
    for s in range(0, len(dataset), batch_size):
        trace = forward_full(config, params, dataset.tokens[s:s + batch_size])
        for lam in trace.lambdas:
            total += haltdist.posterior_from_halting(lam).probs
    return total / len(dataset)


@dataclass
class PriorSweep:
    metrics: list[dict]
    histogram: list[dict]
    posterior: list[dict]
    models: dict


def sweep_prior(splits, model_config: ModelConfig, train_config: TrainConfig, priors, seeds,
                eval_split: str = "dev", q: float = 0.5, log=None, models=None) -> PriorSweep:
    """Retrain per prior and seed; report exit histograms under Q-exit and the
    averaged train-split posterior.  ``models`` may hold already trained
    ``(config, params)`` pairs keyed by ``(prior, seed)``."""
    SweepSpec("lambda_prior", tuple(priors), tuple(seeds))
    eval_ds = splits[eval_split]
    models = dict(models or {})
    metrics, hist, post = [], [], []
    n = model_config.n
    for lam in sorted(float(v) for v in priors):
        accs, depths = [], []
        for seed in seeds:
            if (lam, seed) not in models:
                rep = train(model_config, replace(train_config, lambda_prior=lam, seed=seed, objective="ponder"), splits)
                models[(lam, seed)] = (rep.model_config, rep.params)
                if log:
                    log(f"prior {lam} seed {seed}: dev {rep.best_metric:.4f}")
            config, params = models[(lam, seed)]
            dec = evaluate_policy(config, params, eval_ds, ExitPolicy("q_exit", q))
            accs.append(float(np.mean(dec.prediction == eval_ds.labels)))
            depths.append(float(np.mean(dec.layers_evaluated)))
            counts = np.bincount(dec.exit_layer, minlength=n + 1)[1:]
            hist += [{"lambda_prior": lam, "seed": seed, "layer": i + 1, "count": int(c)} for i, c in enumerate(counts)]
            avg = averaged_posterior(config, params, splits["train"])
            post += [{"lambda_prior": lam, "seed": seed, "layer": i + 1, "prob": float(p)} for i, p in enumerate(avg)]
        metrics.append({"lambda_prior": lam, "mean_metric": float(np.mean(accs)), "std_metric": float(np.std(accs)),
                        "mean_exit_depth": float(np.mean(depths)), "std_exit_depth": float(np.std(depths)),
                        "seeds": len(seeds)})
    return PriorSweep(metrics, hist, post, models)


PRIOR_METRIC_COLUMNS = ("lambda_prior", "mean_metric", "std_metric", "mean_exit_depth", "std_exit_depth", "seeds")
HISTOGRAM_COLUMNS = ("lambda_prior", "seed", "layer", "count")
POSTERIOR_COLUMNS = ("lambda_prior", "seed", "layer", "prob")


def speed_report(families: dict, dataset: Dataset, q_values=(), patience_values=()) -> list[dict]:
    """Pareto rows for each model family, plus the full-depth anchor.

    ``families`` maps a family name to a list of ``(config, params)``, one per
    seed.  Families whose name contains ``pabee`` are swept over patience,
    the rest over q.
    """
    rows = []
    for family in sorted(families):
        models = families[family]
        if not models:
            raise ValueError(f"family {family!r} has no models")
        n = models[0][0].n
        if "pabee" in family:
            grid = [ExitPolicy("patience", int(t)) for t in sorted(patience_values)]
        else:
            grid = [ExitPolicy("q_exit", float(q)) for q in sorted(q_values)]
        grid.append(ExitPolicy("fixed", n))
        for policy in grid:
            metrics, depths = [], []
            for config, params in models:
                dec = evaluate_policy(config, params, dataset, policy)
                metrics.append(float(np.mean(dec.prediction == dataset.labels)))
                depths.append(float(np.mean(dec.layers_evaluated)))
            depth = float(np.mean(depths))
            rows.append({"family": family, "policy": policy.kind, "parameter": policy.value,
                         "speedup": speedup(n, depth), "metric_mean": float(np.mean(metrics)),
                         "metric_std": float(np.std(metrics)), "mean_exit_depth": depth})
    return rows


ABLATION_COLUMNS = ("config", "mean", "std", "median", "mean_exit_depth", "seeds")


def ablation(splits, seeds, model_config, train_config, lambda_learning_rate=None, rows=None,
             eval_split="test", log=None):
    """Run the ablation table; returns ``(table_rows, long_rows, table)``."""
    kw = {} if rows is None else {"rows": tuple(rows)}
    table = run_ablation(splits, list(seeds), model_config, train_config, lambda_learning_rate,
                         eval_split=eval_split, log=log, **kw)
    out = []
    for rec in table.as_records():
        rec["seeds"] = len(table.seeds)
        out.append(rec)
    long_rows = []
    for row in table.rows:
        for seed, metric in zip(table.seeds, row.metrics):
            long_rows.append({"config_id": row.config, "seed": seed, "epoch": table.best_epochs[seed][row.config],
                              "split": eval_split, "metric": metric, "loss": ""})
    return out, long_rows, table
