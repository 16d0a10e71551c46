"""Deterministic SGD training over the frozen-base toy model.

Only adapter and gate arrays update; the base never enters the parameter
set. Batch order is a pure function of the training seed, so identical
configurations produce bit-identical loss trajectories and records. Wall
time is tracked in memory but kept out of the persisted record stream so
that record files are reproducible byte for byte.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward
from .errors import ConfigError, ShapeError
from .model import ToyModel
from .tasks import TaskData


@dataclass(frozen=True)
class Hyper:
    lr: float = 0.5
    steps: int = 2000
    batch_size: int = 8
    momentum: float = 0.0
    count_penalty: float = 0.0
    load_balance: float = 0.0
    eval_every: int = 0  # 0: evaluate only after the final step

    def __post_init__(self) -> None:
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.count_penalty < 0.0 or self.load_balance < 0.0:
            raise ConfigError("auxiliary loss coefficients must be >= 0")
        if self.eval_every < 0:
            raise ConfigError(f"eval_every must be >= 0, got {self.eval_every}")


@dataclass
class TrainRecord:
    step: int
    loss: float
    ce_loss: float
    aux_count: float
    aux_balance: float
    eval_loss: float | None = None
    eval_accuracy: float | None = None
    wall_time: float = 0.0  # in-memory only; not serialized

    def to_json_dict(self) -> dict:
        d = {
            "step": self.step,
            "loss": self.loss,
            "ce_loss": self.ce_loss,
            "aux_count": self.aux_count,
            "aux_balance": self.aux_balance,
        }
        if self.eval_loss is not None:
            d["eval_loss"] = self.eval_loss
            d["eval_accuracy"] = self.eval_accuracy
        return d


@dataclass
class TrainResult:
    records: list[TrainRecord] = field(default_factory=list)
    diverged: bool = False
    diagnostic: dict | None = None
    final_eval: dict | None = None


def batch_indices(seed: int, n_train: int, batch_size: int, step: int) -> np.ndarray:
    """Training batch for a given 1-based step; a pure function of its inputs
    so resumed runs replay the same batch order."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, step)))
    return rng.integers(0, n_train, size=batch_size)


def evaluate(model: ToyModel, data: TaskData, batch_size: int = 8) -> dict:
    """Loss and accuracy over the eval split; forward only, no mutation.

    Small batches keep the block attention matrices small. Per-batch means
    are re-weighted by batch length, so batch_size only affects float
    summation order, never which samples are scored."""
    xs, ys = data.eval_x, data.eval_y
    total_loss = 0.0
    total_correct = 0.0
    n = len(xs)
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        tape = Tape()
        _, metrics = model.loss_and_metrics(tape, xs[lo:hi], ys[lo:hi], data.mode)
        total_loss += metrics["ce_loss"] * (hi - lo)
        total_correct += metrics["accuracy"] * (hi - lo)
    return {"loss": total_loss / n, "accuracy": total_correct / n}


def train(model: ToyModel, data: TaskData, hyper: Hyper, seed: int,
          start_step: int = 0) -> TrainResult:
    """Run SGD from start_step (exclusive) to hyper.steps, updating the
    model's adapter and gate arrays in place."""
    result = TrainResult()
    trainables = model.trainables()
    velocity: dict[str, np.ndarray] = {}
    if hyper.momentum > 0.0:
        velocity = {name: np.zeros_like(arr) for name, arr in trainables}

    for step in range(start_step + 1, hyper.steps + 1):
        t0 = time.perf_counter()
        idx = batch_indices(seed, len(data.train_x), hyper.batch_size, step)
        xs, ys = data.train_x[idx], data.train_y[idx]

        tape = Tape()
        try:
            loss, metrics = model.loss_and_metrics(
                tape, xs, ys, data.mode,
                count_penalty=hyper.count_penalty,
                load_balance=hyper.load_balance,
            )
        except ShapeError as exc:  # parameters went non-finite on a previous step
            result.diverged = True
            result.diagnostic = {"step": step, "reason": f"non-finite parameters: {exc}"}
            return result

        loss_value = float(loss.value[0, 0])
        if not np.isfinite(loss_value):
            result.diverged = True
            result.diagnostic = {"step": step, "reason": f"non-finite loss {loss_value!r}"}
            return result

        backward(tape, loss)
        grads = {
            node.name: node.grad
            for node in tape.nodes
            if node.op is None and node.requires_grad and node.grad is not None
        }
        for name, arr in trainables:
            g = grads.get(name)
            if g is None:
                continue  # array never entered the graph this step
            if hyper.momentum > 0.0:
                v = velocity[name]
                v *= hyper.momentum
                v += g
                arr -= hyper.lr * v
            else:
                arr -= hyper.lr * g

        record = TrainRecord(
            step=step,
            loss=loss_value,
            ce_loss=metrics["ce_loss"],
            aux_count=metrics["aux_count"],
            aux_balance=metrics["aux_balance"],
            wall_time=time.perf_counter() - t0,
        )
        if hyper.eval_every and step % hyper.eval_every == 0:
            ev = evaluate(model, data)
            record.eval_loss = ev["loss"]
            record.eval_accuracy = ev["accuracy"]
        result.records.append(record)

    result.final_eval = evaluate(model, data)
    return result


def write_train_records(records: list[TrainRecord], path) -> None:
    """One JSON object per line, deterministic fields only."""
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json_dict(), sort_keys=True))
            fh.write("\n")


def read_train_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_timings(records: list[TrainRecord], path) -> None:
    """Wall-clock seconds per step, kept apart from the reproducible stream."""
    with open(path, "w") as fh:
        fh.write("step,wall_time\n")
        for r in records:
            fh.write(f"{r.step},{r.wall_time:.17g}\n")
