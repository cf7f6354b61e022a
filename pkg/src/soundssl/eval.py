"""Balanced accuracy, silhouette coefficient, paired t-test and feature export."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import betainc

ALPHA = 0.05


def balanced_accuracy(predictions, labels, class_subset=None) -> float:
    """Mean per-class recall over ``class_subset`` (default: every class in ``labels``).

    Predictions into classes outside the subset still count as misses for the
    true class; samples whose true class is outside the subset are ignored.
    """
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"predictions {predictions.shape} and labels {labels.shape} differ in shape")
    subset = list(np.unique(labels)) if class_subset is None else list(class_subset)
    if not subset:
        raise ValueError("class_subset is empty")
    recalls = []
    for c in subset:
        mask = labels == c
        if not mask.any():
            raise ValueError(f"class {c!r} has no samples in labels")
        recalls.append(float(np.mean(predictions[mask] == c)))
    return float(np.mean(recalls))


def per_class_recall(predictions, labels, class_subset) -> dict:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    return {c: float(np.mean(predictions[labels == c] == c)) for c in class_subset}


def silhouette_samples(features, labels) -> np.ndarray:
    """Per-point silhouette (b - a) / max(a, b) with Euclidean distance; singletons score 0."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(x) != len(labels):
        raise ValueError("features must be (n, D) with one label per row")
    if len(x) < 2:
        raise ValueError("silhouette needs at least 2 points")
    classes, inv = np.unique(labels, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least 2 classes")
    dist = cdist(x, x)
    onehot = np.eye(len(classes))[inv]
    sizes = onehot.sum(axis=0)
    sums = dist @ onehot                                    # (n, n_classes)
    own = sizes[inv]
    a = np.where(own > 1, sums[np.arange(len(x)), inv] / np.maximum(own - 1, 1), 0.0)
    means = sums / sizes
    means[np.arange(len(x)), inv] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return s


def silhouette(features, labels) -> float:
    return float(np.mean(silhouette_samples(features, labels)))


# -- paired t-test ---------------------------------------------------------------

def student_t_cdf(t: float, dof: float) -> float:
    """CDF of Student's t via the regularized incomplete beta function."""
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = 0.5 * float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return 1.0 - tail if t > 0 else tail


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    reject: bool
    dof: int
    mean_diff: float
    zero_variance: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t"] = d["t"] if math.isfinite(d["t"]) else ("inf" if d["t"] > 0 else "-inf")
        return d


def paired_ttest(a, b, alpha: float = ALPHA) -> TTestResult:
    """Two-tailed paired Student's t-test on matched samples ``a`` and ``b``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"a and b must be 1-d and equal length, got {a.shape} and {b.shape}")
    k = len(a)
    if k < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    # differences equal up to rounding (e.g. 0.7-0.6 vs 0.6-0.5) count as zero variance
    if sd <= 64 * np.finfo(np.float64).eps * float(np.max(np.abs(d))):
        if mean == 0.0:
            return TTestResult(0.0, 1.0, False, k - 1, 0.0, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True, k - 1, mean, True)
    t = mean / (sd / math.sqrt(k))
    p = min(1.0, 2.0 * student_t_cdf(-abs(t), k - 1))
    return TTestResult(t, p, p < alpha, k - 1, mean)


# -- reports ---------------------------------------------------------------------

def summarize(values) -> dict:
    """Mean and sample standard deviation of fold scores."""
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
            "folds": [float(x) for x in v]}


def metrics_report(results: dict) -> dict:
    """Table-style report: per init mode, silhouette and balanced accuracy mean/std.

    ``results`` maps init mode to ``{"balanced_accuracy": [...], "silhouette": float}``.
    """
    return {mode: {"balanced_accuracy": summarize(r["balanced_accuracy"]),
                   "silhouette": None if r.get("silhouette") is None else float(r["silhouette"])}
            for mode, r in sorted(results.items())}


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


# -- feature dumps ---------------------------------------------------------------

def write_features(path, clip_ids, labels, features) -> Path:
    """CSV ``clip_id,label,f_0..f_{D-1}`` with 9 significant digits."""
    features = np.asarray(features)
    if features.ndim != 2 or len(features) != len(clip_ids) or len(labels) != len(clip_ids):
        raise ValueError("need one (clip_id, label, feature row) per clip")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["clip_id", "label"] + [f"f_{i}" for i in range(features.shape[1])])
        for cid, lab, row in zip(clip_ids, labels, features):
            w.writerow([cid, lab] + ["%.9g" % v for v in row])
    return path


def read_features(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    ids = [r[0] for r in body]
    labels = [r[1] for r in body]
    feats = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64).reshape(len(body), -1)
    return ids, labels, feats


def export_features(classifier, images, clip_ids, labels, path, batch_size: int = 50) -> Path:
    """Penultimate-layer features (the classification layer's inputs) for ``images``."""
    from .tensor import Tensor, no_grad

    images = np.asarray(images)
    expected = tuple(classifier.encoder.cfg.input_shape)
    if images.shape[1:] != expected:
        raise ValueError(f"images of shape {images.shape[1:]} do not match encoder input {expected}")
    classifier.eval()
    with no_grad():
        feats = [classifier.features(Tensor(images[i:i + batch_size])).data
                 for i in range(0, len(images), batch_size)]
    return write_features(path, clip_ids, labels, np.concatenate(feats) if feats else np.zeros((0, 0)))
