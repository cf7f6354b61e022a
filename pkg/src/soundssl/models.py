"""Encoder, SSL projector and classification head built on :mod:`soundssl.tensor`."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import (ShapeError, Tensor, batchnorm, conv2d, dense, global_average_pool, maxpool2d,
                     relu)
from .tensor.checkpoint import load_checkpoint, save_checkpoint


class Module:
    """Base class: named parameters, named buffers, train/eval mode."""

    def __init__(self):
        self.training = True

    def children(self) -> list[tuple[str, "Module"]]:
        return [(k, v) for k, v in vars(self).items() if isinstance(v, Module)]

    def _own_params(self) -> dict[str, Tensor]:
        return {}

    def _own_buffers(self) -> dict[str, np.ndarray]:
        return {}

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self._own_params())
        for name, child in self.children():
            out.update({f"{name}.{k}": v for k, v in child.parameters().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = dict(self._own_buffers())
        for name, child in self.children():
            out.update({f"{name}.{k}": v for k, v in child.buffers().items()})
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.parameters().items()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params, bufs = self.parameters(), self.buffers()
        expected = set(params) | set(bufs)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, value in state.items():
            target = params[name].data if name in params else bufs.get(name)
            if target is None:
                continue
            if target.shape != tuple(value.shape):
                raise ShapeError(f"{name}: checkpoint shape {tuple(value.shape)} != model shape {target.shape}")
            target[...] = value

    def save(self, path):
        return save_checkpoint(path, self.state_dict())

    def load(self, path, strict: bool = True) -> None:
        self.load_state_dict(load_checkpoint(path), strict)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kw):
        return self.forward(*args, **kw)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    limit = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape).astype(dtype), requires_grad=True)


class Conv2d(Module):
    def __init__(self, in_channels, filters, kernel, rng, stride=1, padding="valid", dtype=np.float32):
        super().__init__()
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        self.weight = _he_uniform(rng, (filters, in_channels, kh, kw), in_channels * kh * kw, dtype)
        self.bias = Tensor(np.zeros(filters, dtype=dtype), requires_grad=True)
        self.stride, self.padding = stride, padding

    def _own_params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class Dense(Module):
    def __init__(self, in_features, out_features, rng, dtype=np.float32):
        super().__init__()
        self.weight = _he_uniform(rng, (in_features, out_features), in_features, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def _own_params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return dense(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, features, momentum=0.99, eps=1e-3, dtype=np.float32):
        super().__init__()
        self.gamma = Tensor(np.ones(features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.momentum, self.eps = momentum, eps

    def _own_params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def _own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x):
        return batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                         self.training, self.momentum, self.eps)


class Sequential(Module):
    def __init__(self, layers: list[tuple[str, object]]):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return [(n, m) for n, m in self.layers if isinstance(m, Module)]

    def forward(self, x):
        for _, layer in self.layers:
            x = layer(x)
        return x


# -- encoder ---------------------------------------------------------------------

@dataclass(frozen=True)
class ConvBlock:
    filters: int
    kernel: int = 5
    stride: int = 1
    pool: tuple[int, int] = (4, 2)
    padding: str = "valid"


@dataclass(frozen=True)
class EncoderConfig:
    """Conv stack description; the encoder ends in global average pooling."""

    blocks: tuple[ConvBlock, ...]
    input_shape: tuple[int, int, int] = (1, 256, 256)

    @property
    def output_dim(self) -> int:
        return self.blocks[-1].filters

    def trace(self) -> list[tuple[int, int, int]]:
        """Activation shape (C, H, W) after every block; raises if a map collapses."""
        c, h, w = self.input_shape
        shapes = []
        for i, b in enumerate(self.blocks):
            if b.padding == "same":
                h, w = -(-h // b.stride), -(-w // b.stride)
            else:
                h, w = (h - b.kernel) // b.stride + 1, (w - b.kernel) // b.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(f"block {i}: convolution output collapses to {(h, w)}")
            ph, pw = b.pool if b.pool else (1, 1)
            h, w = h // ph, w // pw
            if h < 1 or w < 1:
                raise ShapeError(f"block {i}: pooling {b.pool} collapses the map to {(h, w)}")
            c = b.filters
            shapes.append((c, h, w))
        return shapes

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        blocks = tuple(ConvBlock(**{**b, "pool": tuple(b["pool"]) if b.get("pool") else None})
                       for b in d["blocks"])
        return cls(blocks, tuple(d.get("input_shape", (1, 256, 256))))

    @classmethod
    def from_json(cls, text: str) -> "EncoderConfig":
        return cls.from_dict(json.loads(text))


def reference_encoder_config(input_shape=(1, 256, 256)) -> EncoderConfig:
    """Three 5x5 conv blocks (24, 48, 48 filters), each ReLU + 4x2 max-pool.

    A reconstruction of the small bird-sound CNN used as the reference
    encoder; its dense layers are dropped and global average pooling added.
    """
    return EncoderConfig((ConvBlock(24), ConvBlock(48), ConvBlock(48)), tuple(input_shape))


class Encoder(Sequential):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        cfg.trace()
        layers = []
        c = cfg.input_shape[0]
        for i, b in enumerate(cfg.blocks):
            layers.append((f"conv{i}", Conv2d(c, b.filters, b.kernel, rng, b.stride, b.padding, dtype)))
            layers.append((f"relu{i}", relu))
            if b.pool:
                pool = tuple(b.pool)
                layers.append((f"pool{i}", lambda x, p=pool: maxpool2d(x, p)))
            c = b.filters
        layers.append(("gap", global_average_pool))
        super().__init__(layers)
        self.cfg = cfg
        self.output_dim = cfg.output_dim


def build_encoder(cfg: EncoderConfig | None = None, seed: int = 1030, dtype=np.float32) -> Encoder:
    cfg = cfg or reference_encoder_config()
    return Encoder(cfg, np.random.default_rng([seed, 0]), dtype)


# -- projector / SSL model -----------------------------------------------------------

@dataclass(frozen=True)
class ProjectorConfig:
    n_units: int = 512
    momentum: float = 0.99
    eps: float = 1e-3


class Projector(Module):
    """Dense-BN-ReLU, Dense-BN-ReLU, Dense (linear)."""

    def __init__(self, in_dim: int, cfg: ProjectorConfig, rng, dtype=np.float32):
        super().__init__()
        n = cfg.n_units
        self.dense0 = Dense(in_dim, n, rng, dtype)
        self.bn0 = BatchNorm(n, cfg.momentum, cfg.eps, dtype)
        self.dense1 = Dense(n, n, rng, dtype)
        self.bn1 = BatchNorm(n, cfg.momentum, cfg.eps, dtype)
        self.dense2 = Dense(n, n, rng, dtype)

    def forward(self, h):
        h = relu(self.bn0(self.dense0(h)))
        h = relu(self.bn1(self.dense1(h)))
        return self.dense2(h)


class SiameseModel(Module):
    """One encoder + projector applied to both views (two passes, one weight set)."""

    def __init__(self, encoder: Encoder, projector: Projector):
        super().__init__()
        self.encoder = encoder
        self.projector = projector

    def embed(self, x):
        return self.projector(self.encoder(x))

    def forward(self, view_a, view_b):
        return self.embed(view_a), self.embed(view_b)


def build_ssl_model(encoder: Encoder, projector_cfg: ProjectorConfig = ProjectorConfig(),
                    seed: int = 1030) -> SiameseModel:
    dtype = encoder.parameters()["conv0.weight"].dtype
    proj = Projector(encoder.output_dim, projector_cfg, np.random.default_rng([seed, 1]), dtype)
    return SiameseModel(encoder, proj)


# -- classifier --------------------------------------------------------------------

@dataclass(frozen=True)
class HeadConfig:
    n_classes: int = 15
    hidden: tuple[int, ...] = field(default_factory=tuple)


class ClassifierHead(Module):
    def __init__(self, in_dim: int, cfg: HeadConfig, rng, dtype=np.float32):
        super().__init__()
        self.hidden = []
        d = in_dim
        for i, units in enumerate(cfg.hidden):
            layer = Dense(d, units, rng, dtype)
            setattr(self, f"hidden{i}", layer)
            self.hidden.append(layer)
            d = units
        self.out = Dense(d, cfg.n_classes, rng, dtype)

    def penultimate(self, h):
        for layer in self.hidden:
            h = relu(layer(h))
        return h

    def forward(self, h):
        return self.out(self.penultimate(h))


class Classifier(Module):
    def __init__(self, encoder: Encoder, head: ClassifierHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def features(self, x):
        """Input to the final classification layer."""
        return self.head.penultimate(self.encoder(x))

    def forward(self, x):
        return self.head(self.encoder(x))


def build_classifier(encoder: Encoder, head_cfg: HeadConfig = HeadConfig(), seed: int = 1030) -> Classifier:
    dtype = encoder.parameters()["conv0.weight"].dtype
    head = ClassifierHead(encoder.output_dim, head_cfg, np.random.default_rng([seed, 2]), dtype)
    return Classifier(encoder, head)
