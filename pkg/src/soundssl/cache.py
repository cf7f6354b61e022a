"""On-disk spectrogram cache: raw float32 blobs plus a JSON index.

Entries are keyed by (clip content hash, optional augmentation tag, spectrogram
config digest), so changing any DSP parameter misses the cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

import numpy as np

from .dsp import SpectrogramConfig, spectrogram

log = logging.getLogger(__name__)


def clip_hash(clip) -> str:
    h = hashlib.sha256(np.ascontiguousarray(clip.samples, dtype=np.float32).tobytes())
    h.update(str(int(clip.sample_rate)).encode())
    return h.hexdigest()[:24]


class SpectrogramCache:
    def __init__(self, root, cfg: SpectrogramConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.digest = cfg.digest()
        self.blob_dir = self.root / "blobs"
        try:
            self.blob_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"spectrogram cache directory {self.root} is not writable: {exc}") from None
        self.index_path = self.root / "index.json"
        self.index = json.loads(self.index_path.read_text()) if self.index_path.is_file() else {}
        self.hits = 0
        self.misses = 0

    def key(self, clip, tag: str = "") -> str:
        return f"{clip_hash(clip)}-{hashlib.sha256(tag.encode()).hexdigest()[:8]}-{self.digest}"

    def get(self, clip, tag: str = "", compute=None) -> np.ndarray:
        """Cached image for ``clip``; ``compute(clip)`` produces it on a miss."""
        key = self.key(clip, tag)
        blob = self.blob_dir / f"{key}.f32"
        meta = self.index.get(key)
        if meta is not None and blob.is_file():
            self.hits += 1
            return np.fromfile(blob, dtype="<f4").reshape(meta["shape"])
        self.misses += 1
        image = (compute or (lambda c: spectrogram(c, self.cfg)))(clip)
        image = np.ascontiguousarray(image, dtype="<f4")
        image.tofile(blob)
        self.index[key] = {"shape": list(image.shape), "tag": tag}
        return image

    def many(self, clips, tags=None) -> np.ndarray:
        tags = tags or [""] * len(clips)
        out = np.stack([self.get(c, t) for c, t in zip(clips, tags)])
        self.flush()
        return out

    def flush(self) -> None:
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.index, sort_keys=True))
        tmp.replace(self.index_path)
        log.info("spectrogram cache %s: %d hits, %d misses", self.root, self.hits, self.misses)
