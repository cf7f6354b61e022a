"""Supervised fine-tuning and the fold-wise experiment driver."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .eval import balanced_accuracy
from .models import Classifier
from .optim import Optimizer, OptimizerConfig
from .ssl import batches
from .tensor import NonFiniteError, Tensor, no_grad, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainRunConfig:
    epochs: int = 100
    batch_size: int = 50
    seed: int = 1030

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")


def max_norm(images) -> np.ndarray:
    """Scale 8-bit images by 1/255; float images must already lie in [0, 1]."""
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return (images / 255.0).astype(np.float32)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError(f"input pixels must lie in [0, 1], got [{images.min()}, {images.max()}]")
    return images.astype(np.float32, copy=False)


def predict(model: Classifier, images, batch_size: int = 50) -> np.ndarray:
    """Arg-max class ids (inference-mode batchnorm, no gradient tape)."""
    images = max_norm(images)
    model.eval()
    with no_grad():
        logits = [model(Tensor(images[i:i + batch_size])).data for i in range(0, len(images), batch_size)]
    return np.concatenate(logits).argmax(axis=1) if logits else np.zeros(0, dtype=np.int64)


@dataclass
class FinetuneResult:
    best_state: dict
    best_epoch: int
    best_val_accuracy: float
    curves: list[dict] = field(default_factory=list)

    def write_curves(self, path) -> Path:
        path = Path(path)
        cols = ["epoch", "train_loss", "train_accuracy", "val_balanced_accuracy"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in self.curves:
                w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
        return path


def finetune(model: Classifier, train, val, opt_cfg: OptimizerConfig = OptimizerConfig(),
             run: TrainRunConfig = TrainRunConfig()) -> FinetuneResult:
    """Softmax cross-entropy training of encoder + head.

    ``train`` and ``val`` are ``(images, label_ids)``. After every epoch the
    validation balanced accuracy is measured; the best epoch's weights are
    returned (earliest epoch on ties).
    """
    x_train, y_train = max_norm(train[0]), np.asarray(train[1], dtype=np.int64)
    x_val, y_val = max_norm(val[0]), np.asarray(val[1], dtype=np.int64)
    opt = Optimizer(model.parameters(), opt_cfg)
    result = FinetuneResult({}, -1, -1.0)
    for epoch in range(1, run.epochs + 1):
        model.train()
        rng = np.random.default_rng([run.seed, epoch])
        loss_sum, correct = 0.0, 0
        for b, idx in enumerate(batches(len(x_train), run.batch_size, rng)):
            opt.zero_grad()
            try:
                logits = model(Tensor(x_train[idx]))
                loss = softmax_cross_entropy(logits, y_train[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise NonFiniteError(f"fine-tune epoch {epoch}, batch {b}: {exc}") from None
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteError(f"fine-tune epoch {epoch}, batch {b}: non-finite loss")
            opt.step()
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y_train[idx]).sum())
        val_ba = balanced_accuracy(predict(model, x_val, run.batch_size), y_val)
        row = {"epoch": epoch, "train_loss": loss_sum / len(x_train),
               "train_accuracy": correct / len(x_train), "val_balanced_accuracy": val_ba}
        result.curves.append(row)
        log.info("fine-tune epoch %d loss %.4f val BA %.4f", epoch, row["train_loss"], val_ba)
        if val_ba > result.best_val_accuracy:
            result.best_val_accuracy, result.best_epoch = val_ba, epoch
            result.best_state = copy.deepcopy(model.state_dict())
    return result


def run_experiment(cfg, out_root) -> dict:
    """prepare -> (SSL pretrain) -> fine-tune -> evaluate for every fold of ``cfg``.

    Returns the deterministic metrics bundle; the full results (with timings
    and paths) are written to ``results.json`` in the run directory.
    """
    from .pipeline import Run

    run = Run(cfg, out_root)
    run.prepare()
    run.pretrain()
    run.finetune()
    return run.evaluate()
