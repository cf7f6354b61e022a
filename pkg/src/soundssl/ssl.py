"""Barlow Twins and VICReg objectives and the SSL pretraining loop."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .models import SiameseModel
from .optim import Optimizer, OptimizerConfig
from .tensor import NonFiniteError, Tensor, as_tensor, no_grad, relu, sqrt
from .tensor.checkpoint import CheckpointError, load_checkpoint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BarlowTwinsConfig:
    lambda_bt: float = 0.005
    eps_std: float = 1e-12

    def __post_init__(self):
        if not self.lambda_bt > 0:
            raise ValueError("lambda_bt must be positive")


@dataclass(frozen=True)
class VICRegConfig:
    lambda_inv: float = 25.0
    mu_var: float = 25.0
    nu_cov: float = 1.0
    gamma: float = 1.0
    epsilon: float = 1e-4

    def __post_init__(self):
        if min(self.lambda_inv, self.mu_var, self.nu_cov, self.gamma, self.epsilon) < 0:
            raise ValueError("VICReg weights must be nonnegative")


def _check_pair(za: Tensor, zb: Tensor) -> None:
    if za.ndim != 2 or za.shape != zb.shape:
        raise ValueError(f"embeddings must be matching (n, N) arrays, got {za.shape} and {zb.shape}")
    if za.shape[0] < 2:
        raise ValueError(f"batch of {za.shape[0]} is too small; need n >= 2")


def standardize(z: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-dimension zero mean, unit (population) std over the batch."""
    return (z - z.mean(axis=0, keepdims=True)) / sqrt(z.var(axis=0, keepdims=True) + eps)


def cross_correlation(za, zb, eps: float = 1e-12) -> Tensor:
    za, zb = as_tensor(za), as_tensor(zb)
    _check_pair(za, zb)
    return (standardize(za, eps).T @ standardize(zb, eps)) / za.shape[0]


def barlow_twins_terms(za, zb, cfg: BarlowTwinsConfig = BarlowTwinsConfig()) -> dict[str, Tensor]:
    """Invariance sum_i (1 - C_ii)^2 and weighted redundancy lambda * sum_{i!=j} C_ij^2."""
    za, zb = as_tensor(za), as_tensor(zb)
    c = cross_correlation(za, zb, cfg.eps_std)
    eye = np.eye(c.shape[0], dtype=c.dtype)
    invariance = ((eye - c * eye) ** 2).sum()
    redundancy = ((c * (1 - eye)) ** 2).sum() * cfg.lambda_bt
    return {"loss": invariance + redundancy, "invariance": invariance, "redundancy": redundancy}


def barlow_twins_loss(za, zb, cfg: BarlowTwinsConfig = BarlowTwinsConfig()) -> Tensor:
    return barlow_twins_terms(za, zb, cfg)["loss"]


def _variance_term(z: Tensor, cfg: VICRegConfig) -> Tensor:
    std = sqrt(z.var(axis=0, ddof=1) + cfg.epsilon)
    return relu(cfg.gamma - std).mean()


def _covariance_term(z: Tensor) -> Tensor:
    n, dim = z.shape
    centered = z - z.mean(axis=0, keepdims=True)
    cov = (centered.T @ centered) / (n - 1)
    off = cov * (1 - np.eye(dim, dtype=cov.dtype))
    return (off ** 2).sum() / dim


def vicreg_terms(za, zb, cfg: VICRegConfig = VICRegConfig()) -> dict[str, Tensor]:
    """Weighted invariance, variance and covariance terms and their sum."""
    za, zb = as_tensor(za), as_tensor(zb)
    _check_pair(za, zb)
    invariance = ((za - zb) ** 2).mean() * cfg.lambda_inv
    variance = (_variance_term(za, cfg) + _variance_term(zb, cfg)) * cfg.mu_var
    covariance = (_covariance_term(za) + _covariance_term(zb)) * cfg.nu_cov
    return {"loss": invariance + variance + covariance, "invariance": invariance,
            "variance": variance, "covariance": covariance}


def vicreg_loss(za, zb, cfg: VICRegConfig = VICRegConfig()) -> Tensor:
    return vicreg_terms(za, zb, cfg)["loss"]


def make_objective(name: str, cfg=None):
    """Return (terms function, term names) for ``"vicreg"`` or ``"barlow"``."""
    if name == "vicreg":
        cfg = cfg or VICRegConfig()
        return (lambda a, b: vicreg_terms(a, b, cfg)), ("invariance", "variance", "covariance")
    if name in ("barlow", "barlow_twins"):
        cfg = cfg or BarlowTwinsConfig()
        return (lambda a, b: barlow_twins_terms(a, b, cfg)), ("invariance", "redundancy")
    raise ValueError(f"unknown SSL objective {name!r}")


# -- pretraining -------------------------------------------------------------------

def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Index batches of ``batch_size``; a trailing batch of one is merged into its predecessor."""
    if batch_size < 2:
        raise ValueError("batch_size must be at least 2")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


@dataclass
class PretrainResult:
    best_state: dict
    best_epoch: int
    best_val_loss: float
    curves: list[dict] = field(default_factory=list)
    term_names: tuple = ()

    def write_curves(self, path) -> Path:
        path = Path(path)
        cols = ["epoch", "train_loss", "val_loss"] + [f"term_{t}" for t in self.term_names]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for row in self.curves:
                writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
        return path


def _evaluate(model: SiameseModel, views_a, views_b, objective, batch_size) -> float:
    model.eval()
    total, count = 0.0, 0
    with no_grad():
        for idx in batches(len(views_a), batch_size):
            za, zb = model(Tensor(views_a[idx]), Tensor(views_b[idx]))
            total += float(objective(za, zb)["loss"].data) * len(idx)
            count += len(idx)
    return total / count


def pretrain(model: SiameseModel, train_views, val_views, objective: str = "vicreg",
             loss_cfg=None, opt_cfg: OptimizerConfig = OptimizerConfig(), epochs: int = 100,
             batch_size: int = 50, seed: int = 1030) -> PretrainResult:
    """Train both branches on view pairs; keep the weights with the lowest validation loss.

    ``train_views`` and ``val_views`` are ``(views_a, views_b)`` arrays of shape
    (n, C, H, W) with pixel values in [0, 1].
    """
    terms_fn, names = make_objective(objective, loss_cfg)
    train_a, train_b = (np.asarray(v) for v in train_views)
    val_a, val_b = (np.asarray(v) for v in val_views)
    opt = Optimizer(model.parameters(), opt_cfg)
    best = PretrainResult({}, -1, float("inf"), [], names)
    for epoch in range(1, epochs + 1):
        model.train()
        rng = np.random.default_rng([seed, epoch])
        sums = dict.fromkeys(("loss",) + names, 0.0)
        seen = 0
        for b, idx in enumerate(batches(len(train_a), batch_size, rng)):
            opt.zero_grad()
            try:
                za, zb = model(Tensor(train_a[idx]), Tensor(train_b[idx]))
                terms = terms_fn(za, zb)
                terms["loss"].backward()
            except NonFiniteError as exc:
                raise NonFiniteError(f"SSL epoch {epoch}, batch {b}: {exc}") from None
            values = {k: float(v.data) for k, v in terms.items()}
            if not np.isfinite(values["loss"]):
                raise NonFiniteError(f"SSL epoch {epoch}, batch {b}: non-finite loss; terms {values}")
            opt.step()
            for k in sums:
                sums[k] += values[k] * len(idx)
            seen += len(idx)
        val_loss = _evaluate(model, val_a, val_b, terms_fn, batch_size)
        row = {"epoch": epoch, "train_loss": sums["loss"] / seen, "val_loss": val_loss}
        row.update({f"term_{k}": sums[k] / seen for k in names})
        best.curves.append(row)
        log.info("ssl epoch %d train %.5f val %.5f", epoch, row["train_loss"], val_loss)
        if val_loss < best.best_val_loss:
            best.best_val_loss, best.best_epoch = val_loss, epoch
            best.best_state = copy.deepcopy(model.state_dict())
    return best


def extract_encoder(checkpoint) -> dict[str, np.ndarray]:
    """Encoder weights from an SSL checkpoint (path or state dict); the projector is dropped."""
    state = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    enc = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    if not enc:
        raise CheckpointError("malformed checkpoint: no encoder layers")
    return enc


def embedding_std(model: SiameseModel, images, batch_size: int = 50) -> np.ndarray:
    """Per-dimension std of projector outputs (inference mode) over ``images``."""
    model.eval()
    with no_grad():
        z = np.concatenate([model.embed(Tensor(images[idx])).data
                            for idx in batches(len(images), batch_size)])
    return z.std(axis=0)
