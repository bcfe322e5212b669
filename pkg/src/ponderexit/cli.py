"""Command line entry point: ``ponderexit <subcommand> [options]``.

Every subcommand reads an optional JSON config (``--config``); explicit flags
override config keys.  Outputs go to ``--out`` together with ``manifest.json``.
On failure a single line ``error: {...json...}`` goes to stderr and the exit
status is nonzero.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

SUBCOMMANDS = ("gen-data", "train", "eval", "sweep-q", "sweep-prior", "speed", "ablation", "grid-search")


class UsageError(ValueError):
    pass


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _need(cfg, key, cmd):
    if cfg.get(key) in (None, "", []):
        raise UsageError(f"{cmd} needs '{key}' (flag or config key)")
    return cfg[key]


def _model_and_train(cfg, seed):
    from .model import ModelConfig
    from .training import TrainConfig

    tc = TrainConfig.from_dict(cfg.get("train", {}))
    if seed is not None:
        tc = replace(tc, seed=seed)
    return ModelConfig.from_dict(cfg.get("model", {})), tc


def _fit_model_to_data(mcfg, splits):
    """Fill vocabulary, length and class count from the data when left at defaults."""
    ds = splits["train"]
    vocab = int(max(int(d.tokens.max()) for _, d in splits.items() if len(d)) + 1)
    classes = int(max(int(d.labels.max()) for _, d in splits.items() if len(d)) + 1)
    return replace(mcfg, vocab_size=max(mcfg.vocab_size, vocab), max_seq_len=max(mcfg.max_seq_len, ds.tokens.shape[1]),
                   num_classes=max(mcfg.num_classes, classes))


def _seeds(cfg, seed):
    seeds = cfg.get("seeds")
    if seeds is None:
        return [0 if seed is None else seed]
    return [int(s) for s in seeds]


def cmd_gen_data(cfg, args, out):
    from .benchdata import TaskSpec, generate, save_splits

    spec = TaskSpec.from_dict(cfg["task"] if isinstance(cfg.get("task"), dict) else cfg)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    splits = generate(spec)
    save_splits(splits, out, spec)
    return [f"{name}.tsv" for name, _ in splits.items()] + ["task.json"]


def cmd_train(cfg, args, out):
    from . import harness
    from .benchdata import load_splits
    from .model import save_checkpoint
    from .training import train

    splits = load_splits(_need(cfg, "data", "train"))
    mcfg, tc = _model_and_train(cfg, args.seed)
    mcfg = _fit_model_to_data(mcfg, splits)
    rep = train(mcfg, tc, splits, log=_log)
    save_checkpoint(out / "model.ckpt.npz", rep.model_config, rep.params,
                    {"train_config": tc.to_dict(), "best_epoch": rep.best_epoch, "best_metric": rep.best_metric})
    rows = []
    for rec in rep.epochs:
        rows.append({"config_id": "train", "seed": tc.seed, "epoch": rec.epoch, "split": "train",
                     "metric": "", "loss": rec.train_loss})
        rows.append({"config_id": "train", "seed": tc.seed, "epoch": rec.epoch, "split": "dev",
                     "metric": rec.val_metric, "loss": ""})
    harness.write_csv(out / "train_log.csv", rows, harness.LONG_COLUMNS)
    return ["model.ckpt.npz", "train_log.csv"]


def cmd_eval(cfg, args, out):
    from . import harness
    from .benchdata import load_splits
    from .model import load_checkpoint

    mcfg, params, _ = load_checkpoint(_need(cfg, "checkpoint", "eval"))
    split = cfg.get("split", "test")
    ds = load_splits(_need(cfg, "data", "eval"))[split]
    rows, summary = harness.evaluate(mcfg, params, ds, cfg.get("policy", "q_exit:0.5"), seed=args.seed or 0)
    harness.write_eval(out, rows, summary)
    _log(json.dumps({k: summary[k] for k in ("policy", "metric", "mean_exit_depth", "speedup")}))
    return ["eval.csv", "eval_summary.csv"]


def _load_models(paths):
    from .model import load_checkpoint

    return [load_checkpoint(p)[:2] for p in paths]


def cmd_sweep_q(cfg, args, out):
    from . import harness
    from .benchdata import load_splits

    models = _load_models(_need(cfg, "checkpoints", "sweep-q"))
    ds = load_splits(_need(cfg, "data", "sweep-q"))[cfg.get("split", "dev")]
    rows = harness.sweep_q(models, ds, cfg.get("q", [0.05, 0.25, 0.5, 0.75, 0.95]))
    harness.write_csv(out / "sweep_q.csv", rows, harness.SWEEP_Q_COLUMNS)
    return ["sweep_q.csv"]


def cmd_sweep_prior(cfg, args, out):
    from . import harness
    from .benchdata import load_splits

    splits = load_splits(_need(cfg, "data", "sweep-prior"))
    mcfg, tc = _model_and_train(cfg, None)
    mcfg = _fit_model_to_data(mcfg, splits)
    res = harness.sweep_prior(splits, mcfg, tc, cfg.get("priors", [0.1, 0.15, 0.25, 0.5]), _seeds(cfg, args.seed),
                              eval_split=cfg.get("split", "dev"), log=_log)
    harness.write_csv(out / "prior_metrics.csv", res.metrics, harness.PRIOR_METRIC_COLUMNS)
    harness.write_csv(out / "prior_histogram.csv", res.histogram, harness.HISTOGRAM_COLUMNS)
    harness.write_csv(out / "prior_posterior.csv", res.posterior, harness.POSTERIOR_COLUMNS)
    return ["prior_metrics.csv", "prior_histogram.csv", "prior_posterior.csv"]


def cmd_speed(cfg, args, out):
    from . import harness
    from .benchdata import load_splits

    fams = _need(cfg, "families", "speed")
    families = {name: _load_models(paths) for name, paths in fams.items()}
    ds = load_splits(_need(cfg, "data", "speed"))[cfg.get("split", "dev")]
    n = next(iter(families.values()))[0][0].n
    rows = harness.speed_report(families, ds, cfg.get("q", [0.05, 0.25, 0.5, 0.75, 0.95]),
                                cfg.get("patience", list(range(1, n))))
    harness.write_csv(out / "speed.csv", rows, harness.SPEED_COLUMNS)
    return ["speed.csv"]


def cmd_ablation(cfg, args, out):
    from . import harness
    from .benchdata import load_splits

    splits = load_splits(_need(cfg, "data", "ablation"))
    mcfg, tc = _model_and_train(cfg, None)
    mcfg = _fit_model_to_data(mcfg, splits)
    table_rows, long_rows, _ = harness.ablation(splits, _seeds(cfg, args.seed), mcfg, tc,
                                                cfg.get("lambda_learning_rate"), cfg.get("rows"),
                                                cfg.get("split", "test"), log=_log)
    harness.write_csv(out / "ablation.csv", table_rows, harness.ABLATION_COLUMNS)
    harness.write_csv(out / "ablation_runs.csv", long_rows, harness.LONG_COLUMNS)
    return ["ablation.csv", "ablation_runs.csv"]


def cmd_grid_search(cfg, args, out):
    from . import harness
    from .benchdata import load_splits
    from .training import DESK_GRID, grid_search

    splits = load_splits(_need(cfg, "data", "grid-search"))
    mcfg, tc = _model_and_train(cfg, None)
    mcfg = _fit_model_to_data(mcfg, splits)
    res = grid_search(mcfg, cfg.get("grid", DESK_GRID), splits, _seeds(cfg, args.seed), tc, log=_log)
    harness.write_csv(out / "grid_runs.csv", res.rows(), harness.LONG_COLUMNS)
    summary = res.summary_rows()
    cols = list(summary[0])
    harness.write_csv(out / "grid_summary.csv", summary, cols)
    (out / "best_train_config.json").write_text(res.best.to_json() + "\n")
    return ["grid_runs.csv", "grid_summary.csv", "best_train_config.json"]


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep-q": cmd_sweep_q,
    "sweep-prior": cmd_sweep_prior, "speed": cmd_speed, "ablation": cmd_ablation, "grid-search": cmd_grid_search,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ponderexit", description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    p.add_argument("--threads", type=int, default=1, help="numerical library threads")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        if name in ("train", "eval", "sweep-q", "sweep-prior", "speed", "ablation", "grid-search"):
            s.add_argument("--data", help="directory written by gen-data")
        if name == "eval":
            s.add_argument("--checkpoint")
            s.add_argument("--policy", help="e.g. q_exit:0.5, sample:1234, patience:6, entropy:0.4, fixed:12, expectation")
            s.add_argument("--split", choices=("train", "dev", "test"))
        if name == "sweep-q":
            s.add_argument("--checkpoints", nargs="+")
            s.add_argument("--q", type=float, nargs="+")
        if name in ("sweep-prior",):
            s.add_argument("--priors", type=float, nargs="+")
        if name in ("sweep-prior", "ablation", "grid-search"):
            s.add_argument("--seeds", type=int, nargs="+")
    return p


def _merge(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    for key in ("data", "checkpoint", "policy", "split", "checkpoints", "q", "priors", "seeds"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(args.threads))
        cfg = {}
        if args.config is not None:
            cfg = json.loads(Path(args.config).read_text())
            if not isinstance(cfg, dict):
                raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        outputs = HANDLERS[args.command](cfg, args, out)
        from .harness import write_manifest

        write_manifest(out, args.command, cfg, args.seed, outputs, {"threads": args.threads})
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        print("error: " + json.dumps({"command": args.command, "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
