"""STFT, mel filterbank and fixed-size gray-scale mel-spectrogram images."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DB_FLOOR = 1e-10


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 2048
    hop_length: int = 512
    center: bool = True
    pad_mode: str = "reflect"

    def __post_init__(self):
        if self.window_length < 2 or self.hop_length < 1:
            raise ValueError(f"invalid STFT sizes: window {self.window_length}, hop {self.hop_length}")

    @classmethod
    def from_overlap(cls, window_length: int, overlap: float = 0.75, **kw) -> "StftConfig":
        hop = int(round(window_length * (1.0 - overlap)))
        return cls(window_length=window_length, hop_length=hop, **kw)

    @property
    def overlap(self) -> float:
        return 1.0 - self.hop_length / self.window_length

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 256
    f_min: float = 0.0
    f_max: float | None = None  # None means sample_rate / 2
    scale: str = "htk"


@dataclass(frozen=True)
class SpectrogramConfig:
    """Everything that determines a spectrogram image, used as a cache key."""

    sample_rate: int = 44100
    stft: StftConfig = field(default_factory=StftConfig)
    mel: MelConfig = field(default_factory=MelConfig)
    n_frames: int = 256

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _samples(clip) -> np.ndarray:
    return np.asarray(getattr(clip, "samples", clip), dtype=np.float64)


def hann_window(length: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant used for spectral analysis)."""
    n = np.arange(length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n = cfg.window_length
    if cfg.center:
        pad = n // 2
        mode = cfg.pad_mode if (cfg.pad_mode != "reflect" or len(x) > pad) else "constant"
        x = np.pad(x, pad, mode=mode)
    if len(x) < n:
        raise ValueError(f"signal of {len(x)} samples is shorter than one window ({n})")
    return sliding_window_view(x, n)[::cfg.hop_length]


def stft(clip, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex STFT with shape (window_length // 2 + 1, frames)."""
    frames = _frames(_samples(clip), cfg)
    return np.fft.rfft(frames * hann_window(cfg.window_length), axis=1).T


def stft_power(clip, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """|STFT|^2, rows are frequency bins, columns are frames."""
    spec = stft(clip, cfg)
    return spec.real ** 2 + spec.imag ** 2


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig(), length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    n, hop = cfg.window_length, cfg.hop_length
    win = hann_window(n)
    frames = np.fft.irfft(spec.T, n=n, axis=1) * win
    n_frames = frames.shape[0]
    total = n + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop:i * hop + n] += frames[i]
        norm[i * hop:i * hop + n] += win ** 2
    nz = norm > 1e-8
    out[nz] /= norm[nz]
    if cfg.center:
        out = out[n // 2:]
    if length is not None:
        out = out[:length] if len(out) >= length else np.pad(out, (0, length - len(out)))
    return out


def filter_edges_hz(cfg: MelConfig, sample_rate: float) -> np.ndarray:
    """n_mels + 2 mel-spaced edge frequencies; filter i spans edges[i]..edges[i+2]."""
    f_max = sample_rate / 2.0 if cfg.f_max is None else cfg.f_max
    if cfg.n_mels < 2:
        raise ValueError("n_mels must be at least 2")
    if not (0.0 <= cfg.f_min < f_max <= sample_rate / 2.0):
        raise ValueError(f"invalid mel range [{cfg.f_min}, {f_max}] for sample rate {sample_rate}")
    if cfg.scale != "htk":
        raise ValueError(f"unknown mel scale {cfg.scale!r}")
    mels = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(f_max), cfg.n_mels + 2)
    return mel_to_hz(mels)


def filter_centers_hz(cfg: MelConfig, sample_rate: float) -> np.ndarray:
    return filter_edges_hz(cfg, sample_rate)[1:-1]


def _triangle_integral(f, lo, mid, hi):
    """Antiderivative of the unit-peak triangle (lo, mid, hi), zero at ``lo``."""
    f = np.clip(f, lo, hi)
    up = (np.minimum(f, mid) - lo) ** 2 / (2.0 * (mid - lo))
    down = (hi - lo) / 2.0 - (hi - np.maximum(f, mid)) ** 2 / (2.0 * (hi - mid))
    return np.where(f > mid, down, up)


def mel_filterbank(cfg: MelConfig, n_fft: int, sample_rate: float) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft // 2 + 1).

    Each weight is the mean of the unit-peak triangle over the frequency band
    covered by the FFT bin, so filters narrower than one bin still have support.
    """
    edges = filter_edges_hz(cfg, sample_rate)
    width = sample_rate / n_fft
    centers = np.arange(n_fft // 2 + 1) * width
    lo_band = (centers - width / 2)[None, :]
    hi_band = (centers + width / 2)[None, :]
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    fb = (_triangle_integral(hi_band, lo, mid, hi) - _triangle_integral(lo_band, lo, mid, hi)) / width
    return np.maximum(fb, 0.0)


_FILTERBANK_CACHE: dict = {}


def _cached_filterbank(cfg: MelConfig, n_fft: int, sample_rate: float) -> np.ndarray:
    key = (cfg, n_fft, float(sample_rate))
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank(cfg, n_fft, sample_rate)
    return _FILTERBANK_CACHE[key]


def mel_db(clip, sample_rate: float, stft_cfg: StftConfig = StftConfig(),
           mel_cfg: MelConfig = MelConfig()) -> np.ndarray:
    power = stft_power(clip, stft_cfg)
    fb = _cached_filterbank(mel_cfg, stft_cfg.window_length, sample_rate)
    return 10.0 * np.log10(fb @ power + DB_FLOOR)


def fit_columns(db: np.ndarray, n_frames: int) -> np.ndarray:
    """Center-crop or pad (at the image floor value) to exactly ``n_frames`` columns."""
    t = db.shape[1]
    if t > n_frames:
        start = (t - n_frames) // 2
        return db[:, start:start + n_frames]
    if t < n_frames:
        left = (n_frames - t) // 2
        return np.pad(db, ((0, 0), (left, n_frames - t - left)), constant_values=db.min())
    return db


def to_gray(db: np.ndarray) -> np.ndarray:
    """Min-max map to 8-bit gray levels; constant input maps to zeros."""
    lo, hi = db.min(), db.max()
    if not hi > lo:
        return np.zeros(db.shape, dtype=np.uint8)
    return np.round((db - lo) / (hi - lo) * 255.0).astype(np.uint8)


def mel_spectrogram_image(clip, stft_cfg: StftConfig = StftConfig(), mel_cfg: MelConfig = MelConfig(),
                          sample_rate: float | None = None, n_frames: int = 256) -> np.ndarray:
    """Gray-scale mel-spectrogram in [0, 1], rows low-to-high mel bins, columns frames.

    ``clip`` is an AudioClip or a sample array (then ``sample_rate`` is required).
    """
    if sample_rate is None:
        sample_rate = getattr(clip, "sample_rate", None)
        if sample_rate is None:
            raise ValueError("sample_rate is required for raw sample arrays")
    db = fit_columns(mel_db(clip, sample_rate, stft_cfg, mel_cfg), n_frames)
    return (to_gray(db) / 255.0).astype(np.float32)


def spectrogram(clip, cfg: SpectrogramConfig) -> np.ndarray:
    return mel_spectrogram_image(clip, cfg.stft, cfg.mel, cfg.sample_rate, cfg.n_frames)


def save_png(image: np.ndarray, path) -> Path:
    """Write an image in [0, 1] as 8-bit gray PNG, low mel bins at the bottom."""
    from PIL import Image

    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path = Path(path)
    Image.fromarray(np.ascontiguousarray(pixels[::-1])).save(path)
    return path
