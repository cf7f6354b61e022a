"""Neural-network operations with hand-written backward passes.

Layout is NCHW for images and (batch, features) for dense activations.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ShapeError, Tensor, as_tensor, matmul

__all__ = [
    "conv2d",
    "maxpool2d",
    "global_average_pool",
    "dense",
    "batchnorm",
    "softmax_cross_entropy",
    "log_softmax",
]

# Upper bound on the number of im2col elements materialized at once.
_IM2COL_BUDGET = 1 << 24


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return v, v
    a, b = v
    return int(a), int(b)


def _same_padding(size: int, k: int, s: int) -> tuple[int, int]:
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2


def _correlate(x: np.ndarray, w: np.ndarray, stride: tuple[int, int]) -> np.ndarray:
    """Valid cross-correlation: (n,C,H,W) x (F,C,kh,kw) -> (n,F,Ho,Wo)."""
    n = x.shape[0]
    f, c, kh, kw = w.shape
    sh, sw = stride
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    per_item = c * ho * wo * kh * kw
    step = max(1, _IM2COL_BUDGET // max(per_item, 1))
    out = np.empty((n, f, ho, wo), dtype=np.result_type(x, w))
    for lo in range(0, n, step):
        part = np.tensordot(win[lo:lo + step], w, axes=([1, 4, 5], [1, 2, 3]))
        out[lo:lo + step] = part.transpose(0, 3, 1, 2)
    return out


def _weight_grad(x: np.ndarray, g: np.ndarray, kshape: tuple, stride) -> np.ndarray:
    n = x.shape[0]
    kh, kw = kshape
    sh, sw = stride
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = g.shape[2], g.shape[3]
    win = win[:, :, :ho, :wo]
    per_item = x.shape[1] * ho * wo * kh * kw
    step = max(1, _IM2COL_BUDGET // max(per_item, 1))
    total = None
    for lo in range(0, n, step):
        part = np.tensordot(g[lo:lo + step], win[lo:lo + step], axes=([0, 2, 3], [0, 2, 3]))
        total = part if total is None else total + part
    return total


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation.

    Args:
        x: input of shape (n, C, H, W).
        w: kernels of shape (F, C, kh, kw).
        b: optional bias of shape (F,).
        stride: int or (sh, sw).
        padding: ``"valid"`` or ``"same"`` (zero padding, extra row/col at the end).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if padding not in ("valid", "same"):
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    sh, sw = _pair(stride)
    _, _, h, wd = x.shape
    kh, kw = w.shape[2:]
    if padding == "same":
        pt, pb = _same_padding(h, kh, sh)
        pl, pr = _same_padding(wd, kw, sw)
    else:
        pt = pb = pl = pr = 0
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x.data
    hp, wp = xp.shape[2:]
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {w.shape[2:]} larger than padded input {(hp, wp)}")
    out = _correlate(xp, w.data, (sh, sw))
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} filters")
        out = out + b.data.reshape(1, -1, 1, 1)
    wdata = w.data

    def backward(g):
        n, f, ho, wo = g.shape
        # Scatter the (possibly strided) output gradient back onto the input grid.
        hd, wdd = (ho - 1) * sh + 1, (wo - 1) * sw + 1
        if sh == 1 and sw == 1:
            gd = g
        else:
            gd = np.zeros((n, f, hd, wdd), dtype=g.dtype)
            gd[:, :, ::sh, ::sw] = g
        gpad = np.pad(gd, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        flipped = wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gx = _correlate(gpad, np.ascontiguousarray(flipped), (1, 1))
        full = np.zeros((n, x.shape[1], hp, wp), dtype=gx.dtype)
        full[:, :, :gx.shape[2], :gx.shape[3]] = gx
        gx = full[:, :, pt:hp - pb, pl:wp - pr]
        gw = _weight_grad(xp, g, (kh, kw), (sh, sw))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, pool=(2, 2)) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    ph, pw = _pair(pool)
    n, c, h, w = x.shape
    ho, wo = h // ph, w // pw
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: pool {(ph, pw)} larger than input {(h, w)}")
    crop = x.data[:, :, :ho * ph, :wo * pw]
    blocks = crop.reshape(n, c, ho, ph, wo, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, ph * pw)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :ho * ph, :wo * pw] = (
            onehot.reshape(n, c, ho, wo, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * ph, wo * pw))
        return (gx,)

    return Tensor._make(out, (x,), backward, "maxpool2d")


def global_average_pool(x: Tensor) -> Tensor:
    """(n, C, H, W) -> (n, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_average_pool: expected 4-d input, got {x.shape}")
    return x.mean(axis=(2, 3))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` with ``w`` of shape (in, out)."""
    out = matmul(x, w)
    return out if b is None else out + b


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.99,
              eps: float = 1e-3) -> Tensor:
    """Batch normalization over the batch axis (and spatial axes for 4-d input).

    In training mode batch statistics (biased variance) are used and the
    running arrays are updated in place as ``r = momentum * r + (1 - momentum) * batch``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batchnorm: expected 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm: parameter shapes {gamma.shape}/{beta.shape} vs {c} channels")
    gm, bt = gamma.data.reshape(bshape), beta.data.reshape(bshape)

    if training:
        m = int(np.prod([x.shape[a] for a in axes]))
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        bvar = (centered ** 2).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(bvar + eps)
        xhat = centered * inv
        running_mean *= momentum
        running_mean += (1 - momentum) * mu.reshape(-1)
        running_var *= momentum
        running_var += (1 - momentum) * bvar.reshape(-1)

        def backward(g):
            dxhat = g * gm
            sum_d = dxhat.sum(axis=axes, keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv / m * (m * dxhat - sum_d - xhat * sum_dx)
            return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)
    else:
        inv = 1.0 / np.sqrt(running_var.reshape(bshape) + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv

        def backward(g):
            return g * gm * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    out = (gm * xhat + bt).astype(x.dtype, copy=False)
    return Tensor._make(out, (x, gamma, beta), backward, "batchnorm")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: label out of range")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")
