import json
import subprocess
import sys

import pytest

from ponderexit import harness
from ponderexit.cli import main

TASK = {"task": "noisy_majority", "vocab_size": 12, "seq_len": 10, "num_classes": 2, "difficulty_levels": 2,
        "examples_per_split": {"train": 48, "dev": 24, "test": 24}, "seed": 0}
MODEL = {"vocab_size": 12, "max_seq_len": 10, "d_model": 16, "n_heads": 2, "d_ff": 32, "max_layers": 6,
         "num_classes": 2}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["--config", str(write(root / "task.json", TASK)), "--out", str(data), "gen-data"]) == 0
    ckpts = {}
    for name, train in (("ponder", {"max_epochs": 2}), ("pabee", {"max_epochs": 2, "objective": "pabee"})):
        model = dict(MODEL, classifier_mode="per_layer" if name == "pabee" else "shared")
        cfg = write(root / f"{name}.json", {"data": str(data), "model": model, "train": train})
        out = root / name
        assert main(["--config", str(cfg), "--seed", "1", "--out", str(out), "train"]) == 0
        ckpts[name] = out / "model.ckpt.npz"
    return root, data, ckpts


def test_gen_data_outputs(pipeline):
    root, data, _ = pipeline
    for f in ("train.tsv", "dev.tsv", "test.tsv", "task.json", "manifest.json"):
        assert (data / f).exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "gen-data" and len(manifest["config_hash"]) == 64


def test_train_outputs(pipeline):
    root, _, ckpts = pipeline
    log = harness.read_csv(root / "ponder" / "train_log.csv")
    assert list(log[0]) == list(harness.LONG_COLUMNS)
    assert {r["split"] for r in log} == {"train", "dev"}
    assert json.loads((root / "ponder" / "manifest.json").read_text())["seed"] == 1


@pytest.mark.parametrize("policy", ["q_exit:0.5", "sample:1234", "patience:3", "entropy:0.4", "fixed:6",
                                    "expectation"])
def test_eval_each_policy(pipeline, tmp_path, policy):
    _, data, ckpts = pipeline
    args = ["--out", str(tmp_path), "eval", "--data", str(data), "--checkpoint", str(ckpts["ponder"]),
            "--policy", policy, "--split", "test"]
    assert main(args) == 0
    rows = harness.read_csv(tmp_path / "eval.csv")
    summary = harness.read_csv(tmp_path / "eval_summary.csv")[0]
    assert len(rows) == 24
    if policy == "expectation":
        assert summary["speedup"] == "1.0" and summary["non_early_exit"] == "1"
    else:
        depth = sum(int(r["layers_evaluated"]) for r in rows) / 24
        assert float(summary["speedup"]) == 6 / depth


def test_eval_twice_identical(pipeline, tmp_path):
    _, data, ckpts = pipeline
    for d in ("a", "b"):
        main(["--out", str(tmp_path / d), "eval", "--data", str(data), "--checkpoint", str(ckpts["ponder"]),
              "--policy", "q_exit:0.5"])
    assert (tmp_path / "a" / "eval.csv").read_bytes() == (tmp_path / "b" / "eval.csv").read_bytes()


def test_sweep_q_and_speed(pipeline, tmp_path):
    root, data, ckpts = pipeline
    assert main(["--out", str(tmp_path / "q"), "sweep-q", "--data", str(data),
                 "--checkpoints", str(ckpts["ponder"])]) == 0
    rows = harness.read_csv(tmp_path / "q" / "sweep_q.csv")
    assert len(rows) == 5
    depths = [float(r["mean_exit_depth"]) for r in rows]
    assert depths == sorted(depths)
    cfg = write(tmp_path / "speed.json", {"data": str(data), "families": {
        "ponder": [str(ckpts["ponder"])], "pabee": [str(ckpts["pabee"])]}, "q": [0.5], "patience": [2, 5]})
    assert main(["--config", str(cfg), "--out", str(tmp_path / "s"), "speed"]) == 0
    rows = harness.read_csv(tmp_path / "s" / "speed.csv")
    assert {r["family"] for r in rows} == {"ponder", "pabee"}
    assert sum(r["policy"] == "fixed" for r in rows) == 2


def test_sweep_prior_ablation_grid(pipeline, tmp_path):
    _, data, _ = pipeline
    base = {"data": str(data), "model": MODEL, "train": {"max_epochs": 1}}
    cfg = write(tmp_path / "p.json", dict(base, priors=[0.1, 0.5], seeds=[0]))
    assert main(["--config", str(cfg), "--out", str(tmp_path / "p"), "sweep-prior"]) == 0
    assert len(harness.read_csv(tmp_path / "p" / "prior_metrics.csv")) == 2
    cfg = write(tmp_path / "a.json", dict(base, seeds=[0]))
    assert main(["--config", str(cfg), "--out", str(tmp_path / "a"), "ablation"]) == 0
    assert len(harness.read_csv(tmp_path / "a" / "ablation.csv")) == 8
    cfg = write(tmp_path / "g.json", dict(base, seeds=[0], grid={"learning_rate": [1e-3, 2e-3]}))
    assert main(["--config", str(cfg), "--out", str(tmp_path / "g"), "grid-search"]) == 0
    runs = harness.read_csv(tmp_path / "g" / "grid_runs.csv")
    assert list(runs[0]) == list(harness.LONG_COLUMNS)
    assert len(harness.read_csv(tmp_path / "g" / "grid_summary.csv")) == 2


def test_failure_prints_machine_readable_line(tmp_path, capsys):
    code = main(["--out", str(tmp_path), "eval", "--checkpoint", str(tmp_path / "missing.npz"), "--data", "x"])
    assert code != 0
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert line.startswith("error: ")
    err = json.loads(line[len("error: "):])
    assert err["command"] == "eval" and err["type"]


def test_bad_policy_string(pipeline, tmp_path, capsys):
    _, data, ckpts = pipeline
    code = main(["--out", str(tmp_path), "eval", "--data", str(data), "--checkpoint", str(ckpts["ponder"]),
                 "--policy", "q_exit:2"])
    assert code != 0 and "q must lie" in capsys.readouterr().err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ponderexit.cli", "--out", str(tmp_path), "train"],
                          capture_output=True, text=True)
    assert proc.returncode != 0
    assert proc.stderr.strip().startswith("error: ")
