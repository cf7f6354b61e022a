"""SGD (momentum), Adam and RMSProp."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, Tensor

KINDS = ("sgd", "adam", "rmsprop")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 1e-2
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {KINDS}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


def update(cfg: OptimizerConfig, param: np.ndarray, grad: np.ndarray, state: dict) -> None:
    """Apply one update to ``param`` in place; ``state`` holds the per-parameter slots."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite gradient passed to the optimizer")
    lr = cfg.learning_rate
    if cfg.kind == "sgd":
        if cfg.momentum:
            v = state.setdefault("velocity", np.zeros_like(param))
            v *= cfg.momentum
            v -= lr * grad
            param += v
        else:
            param -= (lr * grad).astype(param.dtype, copy=False)
    elif cfg.kind == "adam":
        m = state.setdefault("m", np.zeros_like(param))
        v = state.setdefault("v", np.zeros_like(param))
        t = state["t"] = state.get("t", 0) + 1
        m *= cfg.beta1
        m += (1 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1 - cfg.beta2) * grad * grad
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        param -= (lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(param.dtype, copy=False)
    else:
        v = state.setdefault("v", np.zeros_like(param))
        v *= cfg.rho
        v += (1 - cfg.rho) * grad * grad
        param -= (lr * grad / (np.sqrt(v) + cfg.eps)).astype(param.dtype, copy=False)


class Optimizer:
    """Updates a fixed, named set of parameters from their ``.grad``."""

    def __init__(self, params: dict[str, Tensor], cfg: OptimizerConfig):
        self.params = params
        self.cfg = cfg
        self.state: dict[str, dict] = {name: {} for name in params}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None:
                update(self.cfg, p.data, p.grad, self.state[name])

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
