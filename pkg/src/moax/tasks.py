"""Seeded synthetic sequence tasks with disjoint train and eval splits.

Three task kinds:

- token-copy: predict the input token at every position.
- sequence-classification: binary label, 1 when token 0 appears strictly
  more often than token 1; read from the last position.
- modular-addition: sequences are (a, b) pairs, the target is (a + b) mod
  vocab; read from the last position.

Splits are disjoint by construction: sequences are deduplicated (token-copy,
classification) or drawn from a permutation of the full input space
(modular-addition) before being cut into train and eval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

TASK_KINDS = ("token-copy", "sequence-classification", "modular-addition")


@dataclass(frozen=True)
class SyntheticTask:
    kind: str
    seed: int
    n_train: int
    n_eval: int
    seq_len: int
    vocab_size: int

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}; expected one of {TASK_KINDS}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("n_train and n_eval must be positive")
        if self.seq_len < 1 or self.vocab_size < 2:
            raise ConfigError("need seq_len >= 1 and vocab_size >= 2")
        if self.kind == "sequence-classification":
            if self.vocab_size < 3:
                raise ConfigError("sequence-classification needs vocab_size >= 3")
            if self.seq_len < 4:
                raise ConfigError("sequence-classification needs seq_len >= 4")
            if self.n_eval % 2 != 0:
                raise ConfigError("sequence-classification needs an even n_eval for balanced labels")
        if self.kind == "modular-addition":
            if self.seq_len != 2:
                raise ConfigError("modular-addition uses seq_len == 2")
            if self.n_train + self.n_eval > self.vocab_size**2:
                raise ConfigError(
                    f"modular-addition over vocab {self.vocab_size} has only "
                    f"{self.vocab_size**2} distinct pairs"
                )

    @property
    def mode(self) -> str:
        return {
            "token-copy": "all-positions",
            "sequence-classification": "final-binary",
            "modular-addition": "final-vocab",
        }[self.kind]


@dataclass
class TaskData:
    task: SyntheticTask
    train_x: np.ndarray
    train_y: np.ndarray
    eval_x: np.ndarray
    eval_y: np.ndarray

    @property
    def mode(self) -> str:
        return self.task.mode


def _unique_sequences(rng: np.random.Generator, count: int, seq_len: int, vocab: int,
                      max_tries: int = 1000) -> np.ndarray:
    seen: set[tuple[int, ...]] = set()
    rows: list[np.ndarray] = []
    for _ in range(max_tries):
        batch = rng.integers(0, vocab, size=(count, seq_len))
        for row in batch:
            key = tuple(int(v) for v in row)
            if key in seen:
                continue
            seen.add(key)
            rows.append(row)
            if len(rows) == count:
                return np.stack(rows).astype(np.int64)
    raise ConfigError(
        f"could not draw {count} distinct sequences of length {seq_len} over vocab {vocab}"
    )


def _classification_sample(rng: np.random.Generator, label: int, seq_len: int,
                           vocab: int) -> np.ndarray:
    # counts c_hi > c_lo guarantee the label; remaining slots avoid tokens 0/1
    max_count = seq_len // 2
    c_lo = int(rng.integers(0, max_count))
    c_hi = int(rng.integers(c_lo + 1, max_count + 1))
    c0, c1 = (c_hi, c_lo) if label == 1 else (c_lo, c_hi)
    seq = rng.integers(2, vocab, size=seq_len)
    order = rng.permutation(seq_len)
    seq[order[:c0]] = 0
    seq[order[c0:c0 + c1]] = 1
    return seq


def generate(task: SyntheticTask) -> TaskData:
    """Materialize a task; identical seeds give bit-identical arrays."""
    rng = np.random.default_rng(task.seed)
    total = task.n_train + task.n_eval

    if task.kind == "token-copy":
        xs = _unique_sequences(rng, total, task.seq_len, task.vocab_size)
        ys = xs.copy()
        return TaskData(task, xs[:task.n_train], ys[:task.n_train],
                        xs[task.n_train:], ys[task.n_train:])

    if task.kind == "sequence-classification":
        seen: set[tuple[int, ...]] = set()
        xs_rows: list[np.ndarray] = []
        ys_rows: list[int] = []
        label = 0
        tries = 0
        while len(xs_rows) < total:
            tries += 1
            if tries > 1000 * total:
                raise ConfigError("could not draw enough distinct classification sequences")
            seq = _classification_sample(rng, label, task.seq_len, task.vocab_size)
            key = tuple(int(v) for v in seq)
            if key in seen:
                continue
            seen.add(key)
            xs_rows.append(seq)
            ys_rows.append(label)
            label = 1 - label  # alternate so any even contiguous split is balanced
        xs = np.stack(xs_rows).astype(np.int64)
        ys = np.array(ys_rows, dtype=np.int64)
        return TaskData(task, xs[:task.n_train], ys[:task.n_train],
                        xs[task.n_train:], ys[task.n_train:])

    # modular-addition: permute the full (a, b) grid, then split
    v = task.vocab_size
    pairs = np.stack(np.meshgrid(np.arange(v), np.arange(v), indexing="ij"), axis=-1).reshape(-1, 2)
    pairs = pairs[rng.permutation(len(pairs))].astype(np.int64)
    xs = pairs[:total]
    ys = (xs[:, 0] + xs[:, 1]) % v
    return TaskData(task, xs[:task.n_train], ys[:task.n_train],
                    xs[task.n_train:], ys[task.n_train:])


def task_to_dict(task: SyntheticTask) -> dict:
    return {
        "kind": task.kind,
        "seed": task.seed,
        "n_train": task.n_train,
        "n_eval": task.n_eval,
        "seq_len": task.seq_len,
        "vocab_size": task.vocab_size,
    }


def task_from_dict(d: dict) -> SyntheticTask:
    return SyntheticTask(
        kind=d["kind"],
        seed=int(d["seed"]),
        n_train=int(d["n_train"]),
        n_eval=int(d["n_eval"]),
        seq_len=int(d["seq_len"]),
        vocab_size=int(d["vocab_size"]),
    )
