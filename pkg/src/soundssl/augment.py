"""Waveform augmentations, class balancing and two-view generation.

All randomness is keyed by ``(seed, stream tag, clip id)`` so results do not
depend on processing order or parallelism.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample as fft_resample

from .dataset import AudioClip, fix_length
from .dsp import StftConfig, istft, stft

FUNCTIONS = ("stretch", "pitch", "noise")
_BALANCE_STREAM = 0
_VIEW_STREAM = 1

# Zero (not reflect) edge padding: reflected edges corrupt the first phase
# difference and the error persists through the accumulated phase.
AUGMENT_STFT = StftConfig(2048, 512, center=True, pad_mode="constant")


@dataclass(frozen=True)
class AugmentParamGrid:
    stretch_factors: tuple = (0.7, 0.8, 0.9, 1.1, 1.2, 1.3)
    pitch_steps_semitones: tuple = (-12, -6, -3, 3, 6, 12)
    noise_levels_db: tuple = (2, 4, 6, 8, 10, 12)

    def values(self, function: str) -> tuple:
        return {"stretch": self.stretch_factors, "pitch": self.pitch_steps_semitones,
                "noise": self.noise_levels_db}[function]


@dataclass(frozen=True)
class Augmentation:
    """One drawn (function, parameter) pair plus the seed of its noise stream."""

    function: str
    param: float
    noise_seed: int = 0


def _as_clip(clip, sample_rate=None) -> AudioClip:
    if isinstance(clip, AudioClip):
        return clip
    if sample_rate is None:
        raise ValueError("sample_rate is required for raw sample arrays")
    return AudioClip(clip, sample_rate)


def _finish(x: np.ndarray, like: AudioClip) -> AudioClip:
    x = np.clip(fix_length(x, len(like)), -1.0, 1.0)
    return AudioClip(x, like.sample_rate, like.label)


def phase_vocoder(spec: np.ndarray, rate: float, hop_length: int) -> np.ndarray:
    """Resample STFT frames at ``rate`` (> 1 is faster) keeping phase coherence."""
    n_bins, n_frames = spec.shape
    steps = np.arange(0, n_frames, rate)
    advance = np.linspace(0, np.pi * hop_length, n_bins)
    padded = np.pad(spec, ((0, 0), (0, 2)))
    out = np.empty((n_bins, len(steps)), dtype=np.complex128)
    phase = np.angle(spec[:, 0])
    for i, step in enumerate(steps):
        j = int(step)
        left, right = padded[:, j], padded[:, j + 1]
        alpha = step - j
        out[:, i] = ((1 - alpha) * np.abs(left) + alpha * np.abs(right)) * np.exp(1j * phase)
        delta = np.angle(right) - np.angle(left) - advance
        delta -= 2 * np.pi * np.round(delta / (2 * np.pi))
        phase = phase + advance + delta
    return out


def _stretch_samples(x: np.ndarray, factor: float, cfg: StftConfig) -> np.ndarray:
    spec = phase_vocoder(stft(x, cfg), 1.0 / factor, cfg.hop_length)
    return istft(spec, cfg, length=int(round(len(x) * factor)))


def time_stretch(clip, factor: float, stft_cfg: StftConfig = AUGMENT_STFT,
                 sample_rate=None) -> AudioClip:
    """Change duration by ``factor`` (> 1 is slower) without changing pitch.

    The result is zero-padded or center-truncated back to the input length.
    """
    clip = _as_clip(clip, sample_rate)
    if factor <= 0:
        raise ValueError(f"stretch factor must be positive, got {factor}")
    return _finish(_stretch_samples(clip.samples.astype(np.float64), factor, stft_cfg), clip)


def pitch_shift(clip, semitones: float, stft_cfg: StftConfig = AUGMENT_STFT,
                sample_rate=None) -> AudioClip:
    """Scale all frequencies by 2**(semitones / 12), keeping the duration."""
    clip = _as_clip(clip, sample_rate)
    x = clip.samples.astype(np.float64)
    ratio = 2.0 ** (semitones / 12.0)
    stretched = _stretch_samples(x, ratio, stft_cfg)
    return _finish(fft_resample(stretched, len(x)), clip)


def noise_for_snr(x: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """White Gaussian noise scaled so 10*log10(P_x / P_noise) equals ``snr_db`` exactly."""
    p_signal = float(np.mean(np.square(x, dtype=np.float64)))
    if p_signal == 0.0:
        raise ValueError("SNR is undefined for an all-zero clip")
    noise = rng.standard_normal(len(x))
    p_noise = float(np.mean(noise ** 2))
    return noise * math.sqrt(p_signal / (10.0 ** (snr_db / 10.0) * p_noise))


def add_noise(clip, snr_db: float, rng=None, sample_rate=None) -> AudioClip:
    """Mix white noise at the requested SNR (dB); output clipped to [-1, 1]."""
    clip = _as_clip(clip, sample_rate)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = clip.samples.astype(np.float64)
    return _finish(x + noise_for_snr(x, snr_db, rng), clip)


def apply_augmentation(clip: AudioClip, aug: Augmentation,
                       stft_cfg: StftConfig = AUGMENT_STFT) -> AudioClip:
    if aug.function == "stretch":
        return time_stretch(clip, aug.param, stft_cfg)
    if aug.function == "pitch":
        return pitch_shift(clip, aug.param, stft_cfg)
    if aug.function == "noise":
        return add_noise(clip, aug.param, np.random.default_rng(aug.noise_seed))
    raise ValueError(f"unknown augmentation {aug.function!r}")


def draw_augmentation(rng: np.random.Generator, grid: AugmentParamGrid) -> Augmentation:
    function = FUNCTIONS[int(rng.integers(len(FUNCTIONS)))]
    values = grid.values(function)
    param = values[int(rng.integers(len(values)))]
    return Augmentation(function, float(param), int(rng.integers(2 ** 32)))


# -- balancing -------------------------------------------------------------------

@dataclass(frozen=True)
class ClassBalance:
    original_count: int
    copies_per_original: int
    final_count: int


@dataclass
class BalancePlan:
    per_class: dict[str, ClassBalance]
    max_c: int

    @property
    def total(self) -> int:
        return sum(b.final_count for b in self.per_class.values())


def copies_needed(n: int, max_c: int) -> int:
    """ceil((max_c - n) / n) for under-represented classes, else 0."""
    return -((n - max_c) // n) if n < max_c else 0


def build_balance_plan(class_counts: dict, max_c: int = 580) -> BalancePlan:
    per_class = {}
    for c, n in class_counts.items():
        if n <= 0:
            raise ValueError(f"class {c!r} has non-positive count {n}")
        per_class[c] = ClassBalance(n, copies_needed(n, max_c), max(n, max_c))
    return BalancePlan(per_class, max_c)


@dataclass(frozen=True)
class AugmentTask:
    """Recipe for one output clip: a source clip and an optional augmentation."""

    source: int
    label: str | None
    augmentation: Augmentation | None = None
    copy_index: int = -1


def plan_balance(labels, plan: BalancePlan, grid: AugmentParamGrid = AugmentParamGrid(),
                 seed: int = 1030, ids=None) -> list[AugmentTask]:
    """Originals followed by the retained augmented copies.

    Every original draws its ``m_c`` augmentations from its own stream. Copies
    are ranked by (copy round, original position) and each class keeps the
    first ``final_count - original_count`` of them.
    """
    labels = list(labels)
    ids = list(range(len(labels))) if ids is None else list(ids)
    tasks = [AugmentTask(i, lab) for i, lab in enumerate(labels)]
    drawn = {}
    for i, lab in enumerate(labels):
        rng = np.random.default_rng([seed, _BALANCE_STREAM, ids[i]])
        drawn[i] = [draw_augmentation(rng, grid) for _ in range(plan.per_class[lab].copies_per_original)]
    need = {c: b.final_count - b.original_count for c, b in plan.per_class.items()}
    rounds = max((len(v) for v in drawn.values()), default=0)
    for j in range(rounds):
        for i, lab in enumerate(labels):
            if j < len(drawn[i]) and need[lab] > 0:
                tasks.append(AugmentTask(i, lab, drawn[i][j], j))
                need[lab] -= 1
    return tasks


def render(tasks, clips, stft_cfg: StftConfig = AUGMENT_STFT) -> list[AudioClip]:
    out = []
    for t in tasks:
        src = clips[t.source]
        out.append(src if t.augmentation is None else apply_augmentation(src, t.augmentation, stft_cfg))
    return out


def apply_balance(clips, plan: BalancePlan, grid: AugmentParamGrid = AugmentParamGrid(),
                  seed: int = 1030, ids=None, stft_cfg: StftConfig = AUGMENT_STFT) -> list[AudioClip]:
    tasks = plan_balance([c.label for c in clips], plan, grid, seed, ids)
    return render(tasks, clips, stft_cfg)


# -- SSL views -------------------------------------------------------------------

@dataclass
class ViewPair:
    view_a: AudioClip
    view_b: AudioClip
    aug_a: Augmentation
    aug_b: Augmentation
    source: int = -1


def plan_views(n_clips: int, grid: AugmentParamGrid = AugmentParamGrid(), seed: int = 1030,
               ids=None) -> list[tuple[Augmentation, Augmentation]]:
    ids = list(range(n_clips)) if ids is None else list(ids)
    pairs = []
    for i in range(n_clips):
        rng = np.random.default_rng([seed, _VIEW_STREAM, ids[i]])
        pairs.append((draw_augmentation(rng, grid), draw_augmentation(rng, grid)))
    return pairs


def make_view_pairs(clips, grid: AugmentParamGrid = AugmentParamGrid(), seed: int = 1030,
                    ids=None, stft_cfg: StftConfig = AUGMENT_STFT) -> list[ViewPair]:
    """Two independently augmented views of every clip."""
    plans = plan_views(len(clips), grid, seed, ids)
    return [ViewPair(apply_augmentation(c, a, stft_cfg), apply_augmentation(c, b, stft_cfg), a, b, i)
            for i, (c, (a, b)) in enumerate(zip(clips, plans))]


def dump_plan(path, tasks=None, views=None, ids=None) -> Path:
    """Write the chosen (function, parameter) per clip as JSON for auditing."""
    record = {}
    if tasks is not None:
        record["balance"] = [
            {"source": t.source if ids is None else ids[t.source], "label": t.label,
             "copy": t.copy_index, **(asdict(t.augmentation) if t.augmentation else {})}
            for t in tasks]
    if views is not None:
        record["views"] = [
            {"source": i if ids is None else ids[i], "a": asdict(a), "b": asdict(b)}
            for i, (a, b) in enumerate(views)]
    path = Path(path)
    path.write_text(json.dumps(record, indent=1, sort_keys=True))
    return path
