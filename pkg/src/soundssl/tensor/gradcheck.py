"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import NonFiniteError, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    analytic: list = field(repr=False, default_factory=list)
    numeric: list = field(repr=False, default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _relative_error(a: np.ndarray, n: np.ndarray, floor: float) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(f, point, step: float = 1e-6, tolerance: float = 1e-4,
               floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` against central differences.

    ``point`` is an array (or a list of arrays) at which ``f`` is evaluated;
    ``f`` receives one float64 Tensor per array. The relative error of each
    entry is ``|a - n| / max(|a|, |n|, floor)``.
    """
    single = not isinstance(point, (list, tuple))
    points = [np.array(p, dtype=np.float64) for p in ([point] if single else point)]

    inputs = [Tensor(p.copy(), requires_grad=True) for p in points]
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p) if t.grad is None else t.grad for p, t in zip(points, inputs)]

    def evaluate(arrays):
        val = float(f(*[Tensor(a) for a in arrays]).data)
        if not np.isfinite(val):
            raise NonFiniteError("non-finite value during finite differencing")
        return val

    numeric = []
    for i, p in enumerate(points):
        g = np.zeros_like(p)
        flat = g.reshape(-1)
        for j in range(p.size):
            plus = [q.copy() for q in points]
            minus = [q.copy() for q in points]
            plus[i].reshape(-1)[j] += step
            minus[i].reshape(-1)[j] -= step
            flat[j] = (evaluate(plus) - evaluate(minus)) / (2 * step)
        numeric.append(g)

    err = max(_relative_error(a, n, floor) for a, n in zip(analytic, numeric))
    return GradCheckReport(err, tolerance, analytic, numeric)
