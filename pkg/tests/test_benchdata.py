import numpy as np
import pytest

from ponderexit.benchdata import (
    Dataset,
    TaskSpec,
    generate,
    load,
    load_splits,
    save,
    save_splits,
)

SIZES = {"train": 600, "dev": 120, "test": 120}

SPECS = {
    "noisy_majority": TaskSpec(task="noisy_majority", vocab_size=16, seq_len=12, num_classes=3,
                               difficulty_levels=4, examples_per_split=SIZES, seed=1),
    "prefix_parity": TaskSpec(task="prefix_parity", vocab_size=8, seq_len=14, num_classes=2,
                              difficulty_levels=4, examples_per_split=SIZES, seed=2),
    "pattern_depth": TaskSpec(task="pattern_depth", vocab_size=16, seq_len=9, num_classes=8,
                              difficulty_levels=3, examples_per_split=SIZES, seed=3),
}


@pytest.fixture(scope="module", params=sorted(SPECS))
def task(request):
    spec = SPECS[request.param]
    return spec, generate(spec)


def follow(row, n_nodes):
    """Chase pointers from the start; returns (terminal, hops)."""
    nxt = row[1:] % n_nodes
    v, hops = int(row[0]), 0
    while nxt[v] != v:
        v, hops = int(nxt[v]), hops + 1
    return v, hops


def test_same_seed_same_files(task, tmp_path):
    spec, splits = task
    save_splits(splits, tmp_path / "a", spec)
    save_splits(generate(spec), tmp_path / "b", spec)
    for name in ("train.tsv", "dev.tsv", "test.tsv", "task.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_round_trip(task, tmp_path):
    spec, splits = task
    save_splits(splits, tmp_path, spec)
    back = load_splits(tmp_path)
    for name, ds in splits.items():
        assert back[name] == ds


def test_shapes_and_ranges(task):
    spec, splits = task
    for name, ds in splits.items():
        assert len(ds) == SIZES[name]
        assert ds.tokens.shape == (SIZES[name], spec.seq_len)
        assert ds.tokens.min() >= 0 and ds.tokens.max() < spec.vocab_size
        assert set(np.unique(ds.difficulty)) == set(range(spec.difficulty_levels))


def test_balance_per_split_and_stratum(task):
    spec, splits = task
    C = spec.num_classes
    for _, ds in splits.items():
        for subset in [np.ones(len(ds), bool)] + [ds.difficulty == d for d in range(spec.difficulty_levels)]:
            freq = np.bincount(ds.labels[subset], minlength=C) / subset.sum()
            assert np.all(np.abs(freq - 1 / C) < 0.02)


def test_splits_disjoint(task):
    _, splits = task
    seen = [set(map(bytes, ds.tokens.astype(np.int64))) for _, ds in splits.items()]
    assert not (seen[0] & seen[1]) and not (seen[0] & seen[2]) and not (seen[1] & seen[2])


def test_different_seed_differs():
    spec = SPECS["noisy_majority"]
    from dataclasses import replace

    assert generate(spec).train != generate(replace(spec, seed=99)).train


def test_noisy_majority_clean_stratum_is_majority_vote():
    spec = SPECS["noisy_majority"]
    ds = generate(spec).train
    C = spec.num_classes
    clean = ds.difficulty == 0
    token_class = (ds.tokens[clean, 1:] - 1) % C
    votes = np.array([np.bincount(r, minlength=C).argmax() for r in token_class])
    assert np.array_equal(votes, ds.labels[clean])
    # noise grows with difficulty
    agree = []
    for d in range(spec.difficulty_levels):
        rows = ds.difficulty == d
        tc = (ds.tokens[rows, 1:] - 1) % C
        agree.append(np.mean([np.bincount(r, minlength=C).argmax() for r in tc] == ds.labels[rows]))
    assert agree[0] == 1.0 and agree[-1] < agree[0]


def test_prefix_parity_oracle():
    spec = SPECS["prefix_parity"]
    ds = generate(spec).train
    for row, y, d in zip(ds.tokens, ds.labels, ds.difficulty):
        body = row[1:]
        close = int(np.flatnonzero(body == 2)[0])
        assert int(np.sum(body[:close] == 1)) % 2 == y
    lengths = [np.flatnonzero(ds.tokens[ds.difficulty == d, 1:] == 2)[0] for d in range(4)]
    assert lengths == sorted(lengths)


def test_pattern_depth_oracle():
    spec = SPECS["pattern_depth"]
    N = spec.seq_len - 1
    for _, ds in generate(spec).items():
        for row, y, d in zip(ds.tokens, ds.labels, ds.difficulty):
            terminal, hops = follow(row, N)
            assert hops == d + 1
            assert terminal % spec.num_classes == y
            # flagged ids are exactly the pointers into self-loops
            nxt = row[1:] % N
            np.testing.assert_array_equal(row[1:] >= N, nxt[nxt] == nxt)
            # two self-loops: the answer and the decoy
            assert int(np.sum(nxt == np.arange(N))) == 2


@pytest.mark.parametrize("bad", [
    dict(task="sudoku"),
    dict(difficulty_levels=1),
    dict(task="pattern_depth", vocab_size=8, seq_len=9, num_classes=2, difficulty_levels=3),
    dict(task="pattern_depth", vocab_size=16, seq_len=7, num_classes=2, difficulty_levels=3),
    dict(task="prefix_parity", num_classes=3),
    dict(examples_per_split={"valid": 10}),
])
def test_invalid_specs(bad):
    with pytest.raises(ValueError):
        generate(TaskSpec(**{**dict(examples_per_split={"train": 64, "dev": 16, "test": 16}), **bad}))


def test_infeasible_balance_reported():
    with pytest.raises(ValueError, match="too few"):
        generate(TaskSpec(examples_per_split={"train": 3, "dev": 0, "test": 0}))


def test_empty_split_allowed(tmp_path):
    spec = TaskSpec(examples_per_split={"train": 0, "dev": 0, "test": 40})
    splits = generate(spec)
    assert len(splits.train) == 0 and len(splits.test) == 40
    save_splits(splits, tmp_path, spec)
    back = load_splits(tmp_path)
    assert len(back.train) == 0 and back.test == splits.test


def test_truncated_file_names_line(tmp_path):
    ds = generate(SPECS["noisy_majority"]).dev
    path = tmp_path / "dev.tsv"
    save(ds, path)
    lines = path.read_text().splitlines()
    lines[6] = lines[6].split("\t")[0]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match="line 7"):
        load(path)


def test_file_format(tmp_path):
    ds = Dataset(np.array([[0, 5, 3]]), np.array([1]), np.array([2]))
    save(ds, tmp_path / "x.tsv")
    assert (tmp_path / "x.tsv").read_text() == "2\t1\t0 5 3\n"
