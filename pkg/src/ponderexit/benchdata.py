"""Deterministic synthetic classification tasks with graded difficulty.

Three tasks are available:

``noisy_majority``
    Position 0 is a ``[CLS]`` token; every other token belongs to one of
    ``num_classes`` token classes.  The label is the majority token class,
    except that a difficulty-dependent fraction of labels is flipped.
``prefix_parity``
    Binary.  Token 1 is a marker, token 2 closes a prefix whose length grows
    with difficulty; the label is the parity of markers inside the prefix.
``pattern_depth``
    Pointer chasing over ``N = seq_len - 1`` nodes.  Position 0 holds a start
    node and position ``j + 1`` holds ``next(j)``.  Following ``next`` from the
    start reaches a self-loop after ``difficulty + 1`` hops; the label is that
    terminal node modulo ``num_classes``.  The answer is
    ``next(next(...next(start)))``, a nested pattern whose nesting depth is the
    difficulty.  A pointer whose target is a self-loop is written as
    ``target + N``, so a reader can tell it has arrived without one more
    lookup; an equally long decoy chain keeps that flag from giving the
    answer away.

Datasets are written one example per line: ``difficulty<TAB>label<TAB>ids``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gradcore import RngStream

TASKS = ("noisy_majority", "prefix_parity", "pattern_depth")
SPLITS = ("train", "dev", "test")
CLS, MARKER, CLOSE = 0, 1, 2


@dataclass
class TaskSpec:
    task: str = "noisy_majority"
    vocab_size: int = 32
    seq_len: int = 32
    num_classes: int = 2
    difficulty_levels: int = 4
    examples_per_split: dict = field(default_factory=lambda: {"train": 4096, "dev": 512, "test": 512})
    seed: int = 0

    def validate(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.difficulty_levels < 2:
            raise ValueError("difficulty_levels must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if set(self.examples_per_split) - set(SPLITS):
            raise ValueError(f"unknown split names in {sorted(self.examples_per_split)}")
        if self.task == "noisy_majority":
            if self.vocab_size - 1 < self.num_classes:
                raise ValueError("noisy_majority needs at least one token per class besides [CLS]")
            if self.seq_len - 1 < self.num_classes + 1:
                raise ValueError("noisy_majority needs seq_len > num_classes + 1 for a strict majority")
        elif self.task == "prefix_parity":
            if self.num_classes != 2:
                raise ValueError("prefix_parity is a binary task (num_classes=2)")
            if self.vocab_size < 4 or self.seq_len < self.difficulty_levels + 2:
                raise ValueError("prefix_parity needs vocab_size >= 4 and seq_len >= difficulty_levels + 2")
        else:
            nodes = self.seq_len - 1
            if self.vocab_size < 2 * nodes:
                raise ValueError(f"pattern_depth with seq_len={self.seq_len} needs vocab_size >= {2 * nodes}")
            need = 2 * (pattern_hops(self.difficulty_levels - 1) + 1)
            if nodes < need:
                raise ValueError(f"pattern_depth with {self.difficulty_levels} levels needs seq_len >= {need + 1} "
                                 "(answer chain plus an equally long decoy chain)")
            if nodes < self.num_classes:
                raise ValueError("pattern_depth needs at least one node per class")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d).validate()


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray
    difficulty: np.ndarray

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return (isinstance(other, Dataset)
                and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.difficulty, other.difficulty))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.tokens[idx], self.labels[idx], self.difficulty[idx])

    @classmethod
    def empty(cls, seq_len=0):
        return cls(np.zeros((0, seq_len), dtype=np.int64), np.zeros(0, dtype=np.int64),
                   np.zeros(0, dtype=np.int64))


@dataclass
class DatasetSplits:
    train: Dataset
    dev: Dataset
    test: Dataset

    def __getitem__(self, name) -> Dataset:
        return getattr(self, name)

    def items(self):
        return [(s, getattr(self, s)) for s in SPLITS]


# task generators: each returns the token row for a given (label, difficulty)

def _noisy_majority(spec, rng, label, difficulty, noisy):
    C, L = spec.num_classes, spec.seq_len - 1
    majority = label
    if noisy:
        majority = int(rng.choice([c for c in range(C) if c != label]))
    # majority class gets a strict plurality; the rest is spread over the others
    # smallest top for which the other classes can hold the rest below it
    low = -(-(L + C - 1) // C)
    top = int(rng.integers(low, L + 1))
    counts = np.zeros(C, dtype=int)
    counts[majority] = top
    rest = L - top
    others = [c for c in range(C) if c != majority]
    while rest:
        c = others[int(rng.integers(len(others)))]
        if counts[c] + 1 < top:
            counts[c] += 1
            rest -= 1
    classes = np.repeat(np.arange(C), counts)
    per_class = [np.arange(1 + c, spec.vocab_size, C) for c in range(C)]
    ids = np.array([per_class[c][int(rng.integers(len(per_class[c])))] for c in classes])
    return np.concatenate([[CLS], ids[rng.permutation(L)]])


def _prefix_parity(spec, rng, label, difficulty):
    L = spec.seq_len - 1
    # prefix length grows linearly with difficulty, from 1 to L - 1
    lengths = np.linspace(1, L - 1, spec.difficulty_levels).round().astype(int)
    plen = int(lengths[difficulty])
    fillers = np.arange(3, spec.vocab_size)
    row = fillers[rng.integers(len(fillers), size=L)]
    parities = [k for k in range(plen + 1) if k % 2 == label]
    k = int(rng.choice(parities))
    row[rng.choice(plen, size=k, replace=False)] = MARKER
    row[plen] = CLOSE
    tail = np.arange(plen + 1, L)
    if tail.size:
        row[tail] = np.where(rng.random(tail.size) < 0.3, MARKER, row[tail])
    return np.concatenate([[CLS], row])


def pattern_hops(difficulty: int) -> int:
    """Hops from the start node to its terminal."""
    return int(difficulty) + 1


def _pattern_depth(spec, rng, label, difficulty):
    N, C = spec.seq_len - 1, spec.num_classes
    hops = pattern_hops(difficulty)
    terminals = [v for v in range(N) if v % C == label]
    terminal = int(rng.choice(terminals))
    rest = [v for v in range(N) if v != terminal]
    # two disjoint chains of equal length, each ending in its own self-loop
    picked = [int(v) for v in rng.choice(rest, size=2 * hops + 1, replace=False)]
    chain, decoy = picked[:hops] + [terminal], picked[hops:]
    nxt = np.full(N, -1)
    for path in (chain, decoy):
        for a, b in zip(path, path[1:]):
            nxt[a] = b
        nxt[path[-1]] = path[-1]
    # leftover nodes feed into either chain, so neither terminal stands out
    targets = chain + decoy
    for v in np.flatnonzero(nxt < 0):
        nxt[v] = targets[int(rng.integers(len(targets)))]
    # ids N..2N-1 mark a pointer whose target is a self-loop
    ends = nxt[nxt] == nxt
    return np.concatenate([[chain[0]], nxt + N * ends])


def _balanced_labels(rng, count, C):
    labels = np.arange(count) % C
    return labels[rng.permutation(count)]


def _generate_split(spec: TaskSpec, rng: RngStream, size: int) -> Dataset:
    if size == 0:
        return Dataset.empty(spec.seq_len)
    levels = spec.difficulty_levels
    difficulty = np.arange(size) % levels
    difficulty = difficulty[rng.permutation(size)]
    labels = np.zeros(size, dtype=np.int64)
    for d in range(levels):
        idx = np.flatnonzero(difficulty == d)
        labels[idx] = _balanced_labels(rng, idx.size, spec.num_classes)
    tokens = np.zeros((size, spec.seq_len), dtype=np.int64)
    for d in range(levels):
        idx = np.flatnonzero(difficulty == d)
        flip_rate = 0.1 * d
        noisy = np.zeros(idx.size, dtype=bool)
        noisy[rng.permutation(idx.size)[: int(round(flip_rate * idx.size))]] = True
        for pos, i in enumerate(idx):
            if spec.task == "noisy_majority":
                tokens[i] = _noisy_majority(spec, rng, int(labels[i]), d, bool(noisy[pos]))
            elif spec.task == "prefix_parity":
                tokens[i] = _prefix_parity(spec, rng, int(labels[i]), d)
            else:
                tokens[i] = _pattern_depth(spec, rng, int(labels[i]), d)
    return Dataset(tokens, labels, difficulty.astype(np.int64))


def generate(spec: TaskSpec) -> DatasetSplits:
    """Build train/dev/test splits; identical seeds give identical data."""
    spec.validate()
    for name, size in spec.examples_per_split.items():
        if size and size < spec.difficulty_levels * spec.num_classes:
            raise ValueError(f"split {name!r} has {size} examples, too few to balance "
                             f"{spec.num_classes} classes over {spec.difficulty_levels} strata")
    out = {}
    seen = set()
    root = RngStream(spec.seed, 101)
    for k, name in enumerate(SPLITS):
        size = int(spec.examples_per_split.get(name, 0))
        ds = _generate_split(spec, root.child(k), size)
        # keep splits disjoint: drop exact duplicates of earlier splits' rows
        if len(ds):
            keys = [row.tobytes() for row in ds.tokens]
            dup = np.array([key in seen for key in keys])
            if dup.any():
                ds = _regenerate_duplicates(spec, root.child(k, 1), ds, dup, seen)
                keys = [row.tobytes() for row in ds.tokens]
            seen.update(keys)
        out[name] = ds
    return DatasetSplits(**out)


def _regenerate_duplicates(spec, rng, ds, dup, seen):
    tokens = ds.tokens.copy()
    for i in np.flatnonzero(dup):
        for _ in range(1000):
            d, y = int(ds.difficulty[i]), int(ds.labels[i])
            if spec.task == "noisy_majority":
                row = _noisy_majority(spec, rng, y, d, False)
            elif spec.task == "prefix_parity":
                row = _prefix_parity(spec, rng, y, d)
            else:
                row = _pattern_depth(spec, rng, y, d)
            if row.tobytes() not in seen:
                tokens[i] = row
                break
        else:
            raise ValueError("cannot make splits disjoint: the task space is too small for the requested sizes")
    return Dataset(tokens, ds.labels, ds.difficulty)


# file I/O ----------------------------------------------------------------------

def save(dataset: Dataset, path):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for toks, y, d in zip(dataset.tokens, dataset.labels, dataset.difficulty):
            fh.write(f"{int(d)}\t{int(y)}\t{' '.join(str(int(t)) for t in toks)}\n")


def load(path) -> Dataset:
    rows, labels, diffs = [], [], []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            try:
                if len(parts) != 3:
                    raise ValueError(f"expected 3 tab-separated fields, got {len(parts)}")
                d, y = int(parts[0]), int(parts[1])
                toks = [int(t) for t in parts[2].split(" ")]
                if rows and len(toks) != len(rows[0]):
                    raise ValueError(f"expected {len(rows[0])} tokens, got {len(toks)}")
            except ValueError as exc:
                raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from None
            rows.append(toks)
            labels.append(y)
            diffs.append(d)
    if not rows:
        return Dataset.empty()
    return Dataset(np.array(rows, dtype=np.int64), np.array(labels, dtype=np.int64),
                   np.array(diffs, dtype=np.int64))


def save_splits(splits: DatasetSplits, directory, spec: TaskSpec | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, ds in splits.items():
        save(ds, directory / f"{name}.tsv")
    if spec is not None:
        (directory / "task.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def load_splits(directory) -> DatasetSplits:
    directory = Path(directory)
    return DatasetSplits(**{name: load(directory / f"{name}.tsv") if (directory / f"{name}.tsv").exists()
                            else Dataset.empty() for name in SPLITS})
