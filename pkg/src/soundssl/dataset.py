"""Corpus ingestion, stratified splitting, k-fold partitioning and a synthetic corpus."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

log = logging.getLogger(__name__)

MANIFEST_HEADER = ("path", "label", "duration_s")


class DataError(ValueError):
    """Problem with input data: manifests, WAV files, split requests."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise DataError(f"AudioClip must be mono, got shape {self.samples.shape}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: str
    duration_s: float


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    classes: tuple[str, ...]
    duration_mismatches: list[tuple[int, float]] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return [e.label for e in self.entries]

    @property
    def label_ids(self) -> np.ndarray:
        lookup = {c: i for i, c in enumerate(self.classes)}
        return np.array([lookup[e.label] for e in self.entries], dtype=np.int64)

    def class_counts(self) -> dict[str, int]:
        counts = dict.fromkeys(self.classes, 0)
        for e in self.entries:
            counts[e.label] += 1
        return counts


# -- WAV handling --------------------------------------------------------------

def wav_info(path) -> dict:
    """Parse the RIFF header: format tag, channels, rate, bits and frame count."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            head = fh.read(12)
            if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
                raise DataError(f"{path}: not a RIFF/WAVE file")
            fmt = None
            while True:
                chunk = fh.read(8)
                if len(chunk) < 8:
                    break
                cid, size = chunk[:4], struct.unpack("<I", chunk[4:])[0]
                if cid == b"fmt ":
                    body = fh.read(size)
                    if len(body) < 16:
                        raise DataError(f"{path}: corrupt fmt chunk")
                    tag, channels, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                    if tag == 0xFFFE and len(body) >= 26:
                        tag = struct.unpack("<H", body[24:26])[0]
                    fmt = {"format": tag, "channels": channels, "sample_rate": rate, "bits": bits}
                elif cid == b"data":
                    if fmt is None:
                        raise DataError(f"{path}: data chunk before fmt chunk")
                    block = fmt["channels"] * fmt["bits"] // 8
                    fmt["frames"] = size // block if block else 0
                    return fmt
                else:
                    fh.seek(size + (size & 1), 1)
    except OSError as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from None
    raise DataError(f"{path}: corrupt header (no data chunk)")


def fix_length(x: np.ndarray, length: int) -> np.ndarray:
    """Zero-pad the tail or center-truncate to exactly ``length`` samples."""
    n = len(x)
    if n > length:
        start = (n - length) // 2
        return x[start:start + length]
    if n < length:
        return np.pad(x, (0, length - n))
    return x


def resample(x: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    if orig_rate == target_rate:
        return x
    g = gcd(int(orig_rate), int(target_rate))
    return resample_poly(x, target_rate // g, orig_rate // g)


def load_clip(path, target_rate: int = 44100, clip_length_s: float = 3.0,
              label: str | None = None) -> AudioClip:
    """Read a PCM16 / float32 WAV as a mono clip of exactly ``clip_length_s`` seconds."""
    info = wav_info(path)
    if (info["format"], info["bits"]) not in ((1, 16), (3, 32)):
        raise DataError(f"{path}: unsupported codec (format {info['format']}, {info['bits']} bit)")
    if info["channels"] not in (1, 2):
        raise DataError(f"{path}: {info['channels']} channels, expected 1 or 2")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise DataError(f"{path}: corrupt WAV ({exc})") from None
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    x = resample(x, rate, target_rate)
    n = int(round(clip_length_s * target_rate))
    return AudioClip(fix_length(x, n), target_rate, label)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> Path:
    """Write PCM16 (samples clipped to [-1, 1])."""
    path = Path(path)
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    wavfile.write(path, int(sample_rate), pcm)
    return path


# -- manifests -------------------------------------------------------------------

def load_manifest(path, classes=None, clip_length_s: float = 3.0, check_audio: bool = True,
                  duration_tol: float = 1e-3) -> Manifest:
    """Parse and validate a ``path,label,duration_s`` CSV manifest.

    Relative paths resolve against the manifest's directory. Duration
    mismatches are collected in ``Manifest.duration_mismatches`` and logged,
    not raised.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise DataError(f"{path}: empty manifest")
    if tuple(c.strip() for c in rows[0]) != MANIFEST_HEADER:
        raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {','.join(rows[0])}")
    if len(rows) == 1:
        raise DataError(f"{path}: empty manifest")
    known = None if classes is None else set(classes)

    entries = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 3:
            raise DataError(f"{path}:{lineno}: malformed row {row!r}")
        rel, label, dur = (c.strip() for c in row)
        try:
            duration = float(dur)
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed duration {dur!r}") from None
        if not rel or not label:
            raise DataError(f"{path}:{lineno}: malformed row {row!r}")
        if known is not None and label not in known:
            raise DataError(f"{path}:{lineno}: unknown label {label!r}")
        clip_path = Path(rel) if Path(rel).is_absolute() else root / rel
        entries.append(ManifestEntry(clip_path, label, duration))

    mismatches = []
    for i, e in enumerate(entries):
        if check_audio:
            if not e.path.is_file():
                raise DataError(f"{path}:{i + 2}: missing WAV {e.path}")
            info = wav_info(e.path)
            actual = info["frames"] / info["sample_rate"]
            if abs(actual - e.duration_s) > duration_tol:
                log.warning("%s: declared %.3f s but file holds %.3f s", e.path, e.duration_s, actual)
        if abs(e.duration_s - clip_length_s) > duration_tol:
            mismatches.append((i, e.duration_s))
            log.warning("%s: duration %.3f s != configured %.3f s", e.path, e.duration_s, clip_length_s)

    if classes is None:
        classes = sorted({e.label for e in entries})
    return Manifest(entries, tuple(classes), mismatches)


def write_manifest(path, rows) -> Path:
    """``rows`` are (path, label, duration_s) with paths relative to the manifest."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rel, label, dur in rows:
            writer.writerow([str(rel), label, f"{dur:g}"])
    return path


# -- splitting -------------------------------------------------------------------

@dataclass
class SplitPlan:
    train_indices: list[int]
    test_indices: list[int]
    folds: list[list[int]] = field(default_factory=list)
    k: int = 0
    seed: int = 0

    def fold_validation(self, i: int) -> list[int]:
        return self.folds[i]

    def fold_training(self, i: int) -> list[int]:
        held = set(self.folds[i])
        return [j for j in self.train_indices if j not in held]

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "k": self.k, "train": self.train_indices,
                           "test": self.test_indices, "folds": self.folds}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls(d["train"], d["test"], d["folds"], d["k"], d["seed"])


def _labels_of(data) -> list[str]:
    if isinstance(data, Manifest):
        return data.labels
    return [str(x) for x in data]


def stratified_test_counts(class_counts: dict, test_fraction) -> dict:
    """Per-class test sizes: half-up rounding, then a largest-remainder fix of the total.

    The total is forced to ``round(test_fraction * N)``. A surplus is taken
    back from classes with the smallest fractional quota, a deficit goes to
    classes with the largest; ties break on the class name.
    """
    frac = Fraction(test_fraction).limit_denominator(10 ** 9)
    if not 0 < frac < 1:
        raise DataError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    quota = {c: frac * n for c, n in class_counts.items()}
    counts = {c: math.floor(q + Fraction(1, 2)) for c, q in quota.items()}
    total = sum(class_counts.values())
    target = math.floor(frac * total + Fraction(1, 2))
    remainder = {c: q - math.floor(q) for c, q in quota.items()}

    diff = sum(counts.values()) - target
    if diff > 0:
        pool = [c for c in counts if counts[c] >= quota[c] and counts[c] > 1]
        pool.sort(key=lambda c: c, reverse=True)
        pool.sort(key=lambda c: remainder[c])
        for c in pool[:diff]:
            counts[c] -= 1
    elif diff < 0:
        pool = [c for c in counts if counts[c] <= quota[c] and counts[c] < class_counts[c] - 1]
        pool.sort(key=lambda c: c)
        pool.sort(key=lambda c: remainder[c], reverse=True)
        for c in pool[:-diff]:
            counts[c] += 1
    for c, n in class_counts.items():
        if counts[c] < 1 or n - counts[c] < 1:
            raise DataError(f"class {c!r} with {n} samples cannot fill both train and test")
    return counts


def stratified_split(data, test_fraction: float = 0.1, seed: int = 1030) -> SplitPlan:
    """Stratified train/test partition of a Manifest (or a label sequence)."""
    labels = _labels_of(data)
    by_class: dict[str, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(lab, []).append(i)
    for c, idx in by_class.items():
        if len(idx) < 2:
            raise DataError(f"class {c!r} has {len(idx)} sample(s); need at least 2")
    sizes = stratified_test_counts({c: len(v) for c, v in by_class.items()}, test_fraction)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in sorted(by_class):
        idx = np.array(by_class[c])
        perm = rng.permutation(len(idx))
        test.extend(idx[perm[:sizes[c]]].tolist())
        train.extend(idx[perm[sizes[c]:]].tolist())
    return SplitPlan(sorted(train), sorted(test), [], 0, seed)


def kfold(plan: SplitPlan, data, k: int = 5, seed: int = 1030) -> SplitPlan:
    """Fill ``plan.folds`` with ``k`` stratified validation folds over its train subset.

    Each class is shuffled, classes are concatenated in sorted order and the
    result is dealt round-robin, so fold sizes differ by at most one overall
    and per class.
    """
    if k < 2:
        raise DataError(f"k must be at least 2, got {k}")
    labels = _labels_of(data)
    by_class: dict[str, list[int]] = {}
    for i in plan.train_indices:
        by_class.setdefault(labels[i], []).append(i)
    smallest = min(len(v) for v in by_class.values())
    if k > smallest:
        raise DataError(f"k={k} exceeds the smallest class count ({smallest}) in the train subset")
    rng = np.random.default_rng(seed)
    dealt = []
    for c in sorted(by_class):
        idx = np.array(by_class[c])
        dealt.extend(idx[rng.permutation(len(idx))].tolist())
    folds = [sorted(dealt[i::k]) for i in range(k)]
    return SplitPlan(list(plan.train_indices), list(plan.test_indices), folds, k, seed)


def stratified_subsample(indices, data, fraction: float, seed: int) -> list[int]:
    """Keep ``fraction`` of each class (at least one item per class)."""
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return list(indices)
    labels = _labels_of(data)
    by_class: dict[str, list[int]] = {}
    for i in indices:
        by_class.setdefault(labels[i], []).append(i)
    rng = np.random.default_rng(seed)
    keep = []
    for c in sorted(by_class):
        idx = np.array(by_class[c])
        n = max(1, int(round(fraction * len(idx))))
        keep.extend(idx[rng.permutation(len(idx))[:n]].tolist())
    return sorted(keep)


# -- synthetic corpus ------------------------------------------------------------

@dataclass(frozen=True)
class ClassRecipe:
    """Signal family for one synthetic class.

    kind: ``tone`` (steady whistles), ``chirp`` (frequency sweeps) or ``am``
    (amplitude-modulated pulse trains). Energy stays inside ``band_hz``.
    """

    name: str
    kind: str
    band_hz: tuple[float, float]
    noise_level: float = 0.02
    calls: tuple[int, int] = (1, 3)


def default_recipes(n_classes: int = 3, sample_rate: int = 16000) -> list[ClassRecipe]:
    """Class recipes with disjoint, log-spaced bands below 0.8 x Nyquist."""
    kinds = ("tone", "chirp", "am")
    edges = np.geomspace(400.0, 0.8 * sample_rate / 2, 2 * n_classes + 1)
    return [ClassRecipe(f"class_{i:02d}", kinds[i % 3], (float(edges[2 * i]), float(edges[2 * i + 1])))
            for i in range(n_classes)]


def _envelope(n: int) -> np.ndarray:
    return np.sin(np.linspace(0.0, np.pi, n)) ** 2 if n > 1 else np.ones(n)


def synth_clip(recipe: ClassRecipe, sample_rate: int, clip_length_s: float,
               rng: np.random.Generator) -> np.ndarray:
    n = int(round(clip_length_s * sample_rate))
    lo, hi = recipe.band_hz
    x = recipe.noise_level * rng.standard_normal(n)
    for _ in range(int(rng.integers(recipe.calls[0], recipe.calls[1] + 1))):
        length = int(rng.uniform(0.15, 0.5) * n)
        start = int(rng.integers(0, n - length + 1))
        t = np.arange(length) / sample_rate
        amp = rng.uniform(0.2, 0.5)
        if recipe.kind == "tone":
            f = rng.uniform(lo, hi)
            sig = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        elif recipe.kind == "chirp":
            f0, f1 = (lo, hi) if rng.random() < 0.5 else (hi, lo)
            dur = length / sample_rate
            phase = 2 * np.pi * (f0 * t + (f1 - f0) * t ** 2 / (2 * dur))
            sig = np.sin(phase)
        elif recipe.kind == "am":
            f = rng.uniform(lo, hi)
            rate = rng.uniform(6.0, 20.0)
            sig = np.sin(2 * np.pi * f * t) * (0.5 + 0.5 * np.sign(np.sin(2 * np.pi * rate * t)))
        else:
            raise DataError(f"unknown recipe kind {recipe.kind!r}")
        x[start:start + length] += amp * sig * _envelope(length)
    peak = np.max(np.abs(x))
    return x * (0.9 / peak) if peak > 0.9 else x


def synth_corpus(recipes, n_per_class: int, out_dir, seed: int = 1030, sample_rate: int = 16000,
                 clip_length_s: float = 1.0) -> Manifest:
    """Write ``n_per_class`` WAVs per recipe and a ``manifest.csv`` into ``out_dir``."""
    out_dir = Path(out_dir)
    try:
        (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from None
    rows = []
    for ci, recipe in enumerate(recipes):
        for j in range(n_per_class):
            rng = np.random.default_rng([seed, ci, j])
            x = synth_clip(recipe, sample_rate, clip_length_s, rng)
            rel = Path("wav") / f"{recipe.name}_{j:04d}.wav"
            write_wav(out_dir / rel, x, sample_rate)
            rows.append((rel.as_posix(), recipe.name, clip_length_s))
    manifest_path = write_manifest(out_dir / "manifest.csv", rows)
    return load_manifest(manifest_path, classes=[r.name for r in recipes], clip_length_s=clip_length_s)
