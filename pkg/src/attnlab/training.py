"""SGD training loop, schedules, and run reporting.

The loop is deterministic end to end: one generator seeded from the config
drives epoch shuffling, augmentation, and dropout in a fixed order, so two
runs with the same config and seed produce bit-identical reports (wall-clock
duration aside, which is recorded for convenience but excluded from the
determinism contract).
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset, augment_batch
from .layers import Context
from .models import Model

SCHEDULES = ("linear", "cosine")


@dataclass(frozen=True)
class TrainConfig:
    lr0: float
    batch_size: int
    epochs: int
    schedule: str = "cosine"
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    subset_size: int | None = None
    test_subset_size: int | None = None
    attention_dropout: float = 0.0

    def __post_init__(self):
        if self.lr0 < 0:
            raise ad.ConfigError(f"lr0 must be non-negative, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ad.ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ad.ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ad.ConfigError(
                f"batch_size must be >= 2 (train-mode BN needs 2 samples), got {self.batch_size}"
            )
        if self.epochs < 1:
            raise ad.ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.schedule not in SCHEDULES:
            raise ad.ConfigError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")


def lr_at(schedule: str, epoch: int, total_epochs: int, lr0: float) -> float:
    if schedule not in SCHEDULES:
        raise ad.ConfigError(f"unknown schedule {schedule!r}; expected one of {SCHEDULES}")
    if not 0 <= epoch < total_epochs:
        raise ad.ConfigError(f"epoch {epoch} outside [0, {total_epochs})")
    if schedule == "linear":
        return lr0 * (1.0 - epoch / total_epochs)
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


def sgd_step(
    params: list[ad.Parameter], lr: float, momentum: float, weight_decay: float
) -> None:
    """value <- value - lr * buf where buf <- momentum * buf + (grad + wd * value)."""
    for p in params:
        g = p.grad
        if weight_decay and not p.decay_exempt:
            g = g + weight_decay * p.value
        p.momentum *= momentum
        p.momentum += g
        p.value -= lr * p.momentum
        p.zero_grad()


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    test_acc: float
    lambda_min: float | None = None
    lambda_mean: float | None = None
    lambda_max: float | None = None
    lambda_sites: dict[str, dict[str, float]] | None = None


@dataclass
class RunReport:
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    final_test_acc: float = 0.0
    duration_seconds: float = 0.0

    def to_json_dict(self, include_duration: bool = True) -> dict:
        out = {
            "config": self.config,
            "epochs": [asdict(e) for e in self.epochs],
            "final_test_acc": self.final_test_acc,
        }
        if include_duration:
            out["duration_seconds"] = self.duration_seconds
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["epoch", "lr", "train_loss", "test_acc", "lambda_min", "lambda_mean", "lambda_max"]
        )
        for e in self.epochs:
            writer.writerow(
                [
                    e.epoch,
                    repr(e.lr),
                    repr(e.train_loss),
                    repr(e.test_acc),
                    "" if e.lambda_min is None else repr(e.lambda_min),
                    "" if e.lambda_mean is None else repr(e.lambda_mean),
                    "" if e.lambda_max is None else repr(e.lambda_max),
                ]
            )
        return buf.getvalue()


def _lambda_stats(model: Model) -> tuple[dict | None, tuple | None]:
    balances = model.balance_params()
    if not balances:
        return None, None
    sites = {
        name: {
            "min": float(p.value.min()),
            "mean": float(p.value.mean()),
            "max": float(p.value.max()),
        }
        for name, p in balances.items()
    }
    all_values = np.concatenate([p.value for p in balances.values()])
    return sites, (float(all_values.min()), float(all_values.mean()), float(all_values.max()))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def evaluate(model: Model, dataset: Dataset, batch_size: int = 250) -> float:
    """Top-1 accuracy in eval mode (running BN stats, dropout off)."""
    hits = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        tape = ad.Tape()
        logits = model(Context(tape=tape, training=False), tape.leaf(x))
        hits += int((np.argmax(logits.data, axis=1) == y).sum())
    return hits / len(dataset)


def train_eval(
    model: Model,
    train: Dataset,
    test: Dataset,
    config: TrainConfig,
    *,
    augment: bool = True,
    progress=None,
) -> RunReport:
    """Seeded epoch loop: shuffle, augment, step; per-epoch eval accuracy.

    A non-finite activation or loss anywhere aborts the run with a
    diagnostic naming the first offending layer (raised by the op itself).
    """
    started = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    report = RunReport(config={"train": asdict(config), "model": model.describe()})

    m = len(train)
    for epoch in range(config.epochs):
        lr = lr_at(config.schedule, epoch, config.epochs, config.lr0)
        order = rng.permutation(m)
        loss_sum = 0.0
        seen = 0
        for start in range(0, m, config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                continue  # train-mode BN is undefined on a single sample
            images = train.images[idx]
            if augment:
                images = augment_batch(images, rng)
            labels = train.labels[idx]

            tape = ad.Tape()
            ctx = Context(tape=tape, training=True, rng=rng)
            logits = model(ctx, tape.leaf(images))
            loss = ad.cross_entropy(logits, labels)
            grads = ad.backward(tape, loss)
            ad.apply_param_grads(tape, grads)
            sgd_step(params, lr, config.momentum, config.weight_decay)

            loss_sum += float(loss.data) * len(idx)
            seen += len(idx)

        sites, global_stats = _lambda_stats(model)
        record = EpochRecord(
            epoch=epoch,
            lr=lr,
            train_loss=loss_sum / max(seen, 1),
            test_acc=evaluate(model, test),
        )
        if global_stats is not None:
            record.lambda_min, record.lambda_mean, record.lambda_max = global_stats
            record.lambda_sites = sites
        report.epochs.append(record)
        if progress is not None:
            progress(record)

    report.final_test_acc = report.epochs[-1].test_acc if report.epochs else 0.0
    report.duration_seconds = time.perf_counter() - started
    return report
