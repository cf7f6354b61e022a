"""Stage orchestration: prepare, pretrain, finetune, evaluate.

Every stage writes into a run directory named by the config hash and leaves
a ``<stage>.done.json`` marker. A completed stage is never rewritten; rerunning
it is a no-op. ``metrics.json`` holds only deterministic quantities, while
``results.json`` adds wall-clock times and paths.
"""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .augment import apply_augmentation, build_balance_plan, plan_balance, plan_views
from .cache import SpectrogramCache
from .config import ExperimentConfig
from .dataset import DataError, Manifest, SplitPlan, kfold, load_clip, load_manifest, \
    stratified_split, stratified_subsample
from .eval import balanced_accuracy, export_features, metrics_report, read_features, silhouette, \
    write_json
from .models import build_classifier, build_encoder, build_ssl_model
from .ssl import extract_encoder, pretrain
from .tensor import NonFiniteError, ShapeError
from .tensor.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .train import TrainRunConfig, finetune, predict

log = logging.getLogger(__name__)

STAGES = ("prepare", "pretrain", "finetune", "evaluate")


class MissingStageError(RuntimeError):
    """A prerequisite stage has not been run for this configuration."""

    def __init__(self, stage: str, needed_by: str, detail: str = ""):
        self.stage = stage
        super().__init__(f"{needed_by} needs the output of the '{stage}' stage, which has not been run "
                         f"for this config{': ' + detail if detail else ''}; run `soundssl {stage}` first")


class FoldSkipped(RuntimeError):
    """A fold cannot run because its upstream stage failed for that fold."""


class HeldOutLabels:
    """Test labels behind an access log, so reads can be audited."""

    def __init__(self, labels, audit_path: Path):
        self._labels = np.asarray(labels)
        self.audit_path = audit_path

    def reveal(self, stage: str) -> np.ndarray:
        with open(self.audit_path, "a") as fh:
            fh.write(json.dumps({"event": "test_labels_read", "stage": stage}) + "\n")
        return self._labels


def _aug_tag(aug, cfg: ExperimentConfig) -> str:
    return (f"{aug.function}:{aug.param!r}:{aug.noise_seed}:"
            f"{cfg['augment.window_length']}/{cfg['augment.hop_length']}")


class Run:
    def __init__(self, cfg: ExperimentConfig, out_root):
        self.cfg = cfg
        self.out_root = Path(out_root)
        self.dir = self.out_root / f"run-{cfg.digest()[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        config_file = self.dir / "config.toml"
        if not config_file.exists():
            config_file.write_text(self.cfg.to_toml())
        self._manifest = None
        self._clips = None
        self._cache = None

    # -- shared state ----------------------------------------------------------------
    @property
    def manifest(self) -> Manifest:
        if self._manifest is None:
            self.cfg.check_files()
            classes = self.cfg["data.classes"] or None
            self._manifest = load_manifest(self.cfg.manifest_path, classes, self.cfg["data.clip_length_s"])
        return self._manifest

    @property
    def clips(self) -> list:
        if self._clips is None:
            sr, length = self.cfg["data.sample_rate"], self.cfg["data.clip_length_s"]
            self._clips = [load_clip(e.path, sr, length, e.label) for e in self.manifest.entries]
        return self._clips

    @property
    def cache(self) -> SpectrogramCache:
        if self._cache is None:
            self._cache = SpectrogramCache(self.out_root / "cache", self.cfg.spectrogram())
        return self._cache

    def images(self, indices) -> np.ndarray:
        return self.cache.many([self.clips[i] for i in indices])[:, None]

    def augmented_images(self, items) -> np.ndarray:
        """Images for (clip index, augmentation or None) pairs."""
        stft_cfg = self.cfg.augment_stft()
        out = []
        for i, aug in items:
            clip = self.clips[i]
            if aug is None:
                out.append(self.cache.get(clip))
            else:
                out.append(self.cache.get(clip, _aug_tag(aug, self.cfg),
                                          lambda c, a=aug: self._augment_image(c, a, stft_cfg)))
        self.cache.flush()
        return np.stack(out)[:, None]

    def _augment_image(self, clip, aug, stft_cfg):
        from .dsp import spectrogram
        return spectrogram(apply_augmentation(clip, aug, stft_cfg), self.cfg.spectrogram())

    @property
    def n_classes(self) -> int:
        return len(self.manifest.classes)

    def split(self, needed_by: str) -> SplitPlan:
        path = self.dir / "split.json"
        if not path.is_file():
            raise MissingStageError("prepare", needed_by, f"{path} not found")
        return SplitPlan.from_json(path.read_text())

    def fold_dir(self, i: int) -> Path:
        d = self.dir / f"fold{i}"
        d.mkdir(exist_ok=True)
        return d

    def _done(self, stage: str) -> Path:
        return self.dir / f"{stage}.done.json"

    def _complete(self, stage: str) -> dict | None:
        path = self._done(stage)
        if path.is_file():
            log.info("stage %s already complete in %s; nothing to do", stage, self.dir)
            return json.loads(path.read_text())
        return None

    def _mark(self, stage: str, info: dict) -> dict:
        write_json(self._done(stage), info)
        return info

    def _audit(self, event: str, **kw) -> None:
        with open(self.dir / "audit.log", "a") as fh:
            fh.write(json.dumps({"event": event, **kw}, sort_keys=True) + "\n")

    # -- stages ----------------------------------------------------------------------
    def prepare(self) -> dict:
        done = self._complete("prepare")
        if done is not None:
            return done
        t0 = time.perf_counter()
        manifest = self.manifest
        self.images(range(len(manifest)))
        plan = stratified_split(manifest, self.cfg["split.test_fraction"], self.cfg.seed)
        plan = kfold(plan, manifest, self.cfg["split.k"], self.cfg.seed)
        (self.dir / "split.json").write_text(plan.to_json())
        return self._mark("prepare", {"clips": len(manifest), "train": len(plan.train_indices),
                                      "test": len(plan.test_indices), "k": plan.k,
                                      "cache_hits": self.cache.hits, "cache_misses": self.cache.misses,
                                      "seconds": time.perf_counter() - t0})

    def pretrain(self) -> dict:
        done = self._complete("pretrain")
        if done is not None:
            return done
        plan = self.split("pretrain")
        objective = self.cfg.ssl_objective()
        if objective is None:
            return self._mark("pretrain", {"skipped": f"init.mode = {self.cfg['init.mode']}"})
        name, loss_cfg = objective
        folds = {}
        for i in range(plan.k):
            t0 = time.perf_counter()
            try:
                folds[i] = self._pretrain_fold(i, plan, name, loss_cfg)
            except (NonFiniteError, ShapeError, DataError) as exc:
                log.error("fold %d: SSL pretraining failed: %s", i, exc)
                folds[i] = {"error": f"{type(exc).__name__}: {exc}"}
            folds[i]["seconds"] = time.perf_counter() - t0
        return self._mark("pretrain", {"objective": name, "folds": folds})

    def _pretrain_fold(self, i: int, plan: SplitPlan, name: str, loss_cfg) -> dict:
        cfg = self.cfg
        grid = cfg.grid()
        views = {}
        for part, idx in (("train", plan.fold_training(i)), ("val", plan.fold_validation(i))):
            pairs = plan_views(len(idx), grid, cfg.seed, ids=idx)
            views[part] = (self.augmented_images([(j, a) for j, (a, _) in zip(idx, pairs)]),
                           self.augmented_images([(j, b) for j, (_, b) in zip(idx, pairs)]))
        model = build_ssl_model(build_encoder(cfg.encoder(), cfg.seed), cfg.projector(), cfg.seed)
        result = pretrain(model, views["train"], views["val"], name, loss_cfg, cfg.optimizer("ssl"),
                          cfg["ssl.epochs"], cfg["ssl.batch_size"], cfg.seed)
        d = self.fold_dir(i)
        save_checkpoint(d / "ssl.ckpt", result.best_state)
        save_checkpoint(d / "encoder.ckpt", extract_encoder(result.best_state))
        result.write_curves(d / "ssl_curves.csv")
        return {"best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                "first_val_loss": result.curves[0]["val_loss"]}

    def _initial_encoder(self, i: int):
        cfg = self.cfg
        encoder = build_encoder(cfg.encoder(), cfg.seed)
        mode = cfg["init.mode"]
        if mode.startswith("ssl-"):
            path = self.dir / f"fold{i}" / "encoder.ckpt"
            if not path.is_file():
                raise MissingStageError("pretrain", "finetune", f"{path} not found")
            encoder.load_state_dict(load_checkpoint(path))
        elif mode == "checkpoint":
            state = load_checkpoint(cfg.resolve(cfg["init.checkpoint"]))
            try:
                state = extract_encoder(state)
            except CheckpointError:
                pass
            encoder.load_state_dict(state)
        return encoder

    def finetune(self) -> dict:
        done = self._complete("finetune")
        if done is not None:
            return done
        plan = self.split("finetune")
        pretrained = {}
        if self.cfg.ssl_objective() is not None:
            if not self._done("pretrain").is_file():
                raise MissingStageError("pretrain", "finetune")
            pretrained = json.loads(self._done("pretrain").read_text()).get("folds", {})
        folds = {}
        for i in range(plan.k):
            t0 = time.perf_counter()
            try:
                if "error" in pretrained.get(str(i), {}):
                    raise FoldSkipped(f"pretraining failed ({pretrained[str(i)]['error']})")
                folds[i] = self._finetune_fold(i, plan)
            except (NonFiniteError, ShapeError, DataError, FoldSkipped) as exc:
                log.error("fold %d: fine-tuning failed: %s", i, exc)
                folds[i] = {"error": f"{type(exc).__name__}: {exc}"}
            folds[i]["seconds"] = time.perf_counter() - t0
            self._audit("finetune_fold_complete", fold=i)
        return self._mark("finetune", {"folds": folds})

    def balance_tasks(self, subset: list[int]):
        labels = [self.manifest.entries[j].label for j in subset]
        if not self.cfg["balance.enabled"]:
            return [(j, None) for j in subset]
        counts = {}
        for lab in labels:
            counts[lab] = counts.get(lab, 0) + 1
        max_c = self.cfg["balance.max_c"]
        target = math.ceil(max_c * self.cfg["finetune.fraction"]) if max_c > 0 else max(counts.values())
        tasks = plan_balance(labels, build_balance_plan(counts, target), self.cfg.grid(), self.cfg.seed,
                             ids=subset)
        return [(subset[t.source], t.augmentation) for t in tasks]

    def _finetune_fold(self, i: int, plan: SplitPlan) -> dict:
        cfg = self.cfg
        ids = self.manifest.label_ids
        train_idx = plan.fold_training(i)
        subset = stratified_subsample(train_idx, self.manifest, cfg["finetune.fraction"], cfg.seed)
        items = self.balance_tasks(subset)
        x_train = self.augmented_images(items)
        y_train = ids[[j for j, _ in items]]
        val_idx = plan.fold_validation(i)
        x_val, y_val = self.images(val_idx), ids[val_idx]
        model = build_classifier(self._initial_encoder(i), cfg.head(self.n_classes), cfg.seed)
        run = TrainRunConfig(cfg["finetune.epochs"], cfg["finetune.batch_size"], cfg.seed)
        result = finetune(model, (x_train, y_train), (x_val, y_val), cfg.optimizer("finetune"), run)
        d = self.fold_dir(i)
        save_checkpoint(d / "classifier.ckpt", result.best_state)
        result.write_curves(d / "finetune_curves.csv")
        return {"train_clips": len(items), "originals": len(subset), "best_epoch": result.best_epoch,
                "val_balanced_accuracy": result.best_val_accuracy}

    def evaluate(self) -> dict:
        done = self._complete("evaluate")
        if done is not None:
            return json.loads((self.dir / "metrics.json").read_text())
        t0 = time.perf_counter()
        plan = self.split("evaluate")
        ft_marker = self._done("finetune")
        if not ft_marker.is_file():
            raise MissingStageError("finetune", "evaluate", "no fine-tuned checkpoints")
        ft = json.loads(ft_marker.read_text())["folds"]
        cfg = self.cfg
        manifest = self.manifest
        test_idx = plan.test_indices
        x_test = self.images(test_idx)
        held_out = HeldOutLabels(manifest.label_ids[test_idx], self.dir / "audit.log")

        predictions, models = {}, {}
        for i in range(plan.k):
            path = self.dir / f"fold{i}" / "classifier.ckpt"
            if "error" in ft[str(i)]:
                continue
            if not path.is_file():
                raise MissingStageError("finetune", "evaluate", f"{path} not found")
            model = build_classifier(build_encoder(cfg.encoder(), cfg.seed), cfg.head(self.n_classes), cfg.seed)
            model.load_state_dict(load_checkpoint(path))
            predictions[i] = predict(model, x_test, cfg["finetune.batch_size"])
            models[i] = model
        if not predictions:
            raise NonFiniteError("every fold failed; no model to evaluate")

        y_test = held_out.reveal("evaluate")
        score = cfg["data.score_classes"] or list(manifest.classes)
        unknown = sorted(set(score) - set(manifest.classes))
        if unknown:
            raise DataError(f"data.score_classes not in the class set: {unknown}")
        subset = [manifest.classes.index(c) for c in score]
        fold_ba = {i: balanced_accuracy(p, y_test, subset) for i, p in predictions.items()}

        best = max(models, key=lambda i: (ft[str(i)]["val_balanced_accuracy"], -i))
        clip_ids = [manifest.entries[j].path.name for j in test_idx]
        names = [manifest.classes[y] for y in y_test]
        feat_path = export_features(models[best], x_test, clip_ids, names, self.dir / "features.csv",
                                    cfg["finetune.batch_size"])
        _, _, feats = read_features(feat_path)
        keep = np.isin(y_test, subset)
        sil = silhouette(feats[keep], y_test[keep]) if len(np.unique(y_test[keep])) > 1 else None

        mode = cfg["init.mode"]
        metrics = {
            "config_hash": cfg.digest(),
            "init_mode": mode,
            "score_classes": score,
            "fold_balanced_accuracy": [fold_ba[i] for i in sorted(fold_ba)],
            "failed_folds": sorted(int(i) for i, f in ft.items() if "error" in f),
            "best_fold": best,
            "report": metrics_report({mode: {"balanced_accuracy": [fold_ba[i] for i in sorted(fold_ba)],
                                             "silhouette": sil}}),
        }
        write_json(self.dir / "metrics.json", metrics)
        stages = {s: json.loads(self._done(s).read_text()) for s in STAGES[:-1] if self._done(s).is_file()}
        results = {**metrics, "run_dir": str(self.dir), "stages": stages,
                   "checkpoints": {i: str(self.dir / f"fold{i}" / "classifier.ckpt") for i in models},
                   "features": str(feat_path), "evaluate_seconds": time.perf_counter() - t0}
        write_json(self.dir / "results.json", results)
        self._mark("evaluate", {"seconds": results["evaluate_seconds"]})
        return metrics
