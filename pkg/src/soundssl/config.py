"""Experiment configuration: flat dotted keys, TOML files, CLI overrides, hashing.

Precedence is CLI flag > config file > built-in default. Nested TOML tables
are flattened, so ``[ssl]\nepochs = 10`` and ``"ssl.epochs" = 10`` are the
same setting.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentParamGrid
from .dataset import DataError
from .dsp import MelConfig, SpectrogramConfig, StftConfig
from .models import EncoderConfig, HeadConfig, ProjectorConfig, reference_encoder_config
from .optim import OptimizerConfig
from .ssl import BarlowTwinsConfig, VICRegConfig

INIT_MODES = ("random", "checkpoint", "ssl-barlow", "ssl-vicreg")


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 1030,
    "data.manifest": "",
    "data.sample_rate": 44100,
    "data.clip_length_s": 3.0,
    "data.classes": [],
    "data.score_classes": [],
    "split.test_fraction": 0.1,
    "split.k": 5,
    "dsp.window_length": 2048,
    "dsp.hop_length": 512,
    "dsp.n_mels": 256,
    "dsp.f_min": 0.0,
    "dsp.f_max": 0.0,
    "dsp.n_frames": 256,
    "augment.stretch_factors": [0.7, 0.8, 0.9, 1.1, 1.2, 1.3],
    "augment.pitch_steps_semitones": [-12, -6, -3, 3, 6, 12],
    "augment.noise_levels_db": [2, 4, 6, 8, 10, 12],
    "augment.window_length": 2048,
    "augment.hop_length": 512,
    "balance.enabled": True,
    "balance.max_c": 580,
    "encoder.descriptor": "reference",
    "init.mode": "random",
    "init.checkpoint": "",
    "projector.n_units": 512,
    "loss.bt_lambda": 0.005,
    "loss.vicreg_lambda": 25.0,
    "loss.vicreg_mu": 25.0,
    "loss.vicreg_nu": 1.0,
    "loss.vicreg_gamma": 1.0,
    "loss.vicreg_epsilon": 1e-4,
    "ssl.epochs": 100,
    "ssl.batch_size": 50,
    "ssl.optimizer.kind": "sgd",
    "ssl.optimizer.learning_rate": 0.01,
    "ssl.optimizer.momentum": 0.0,
    "finetune.epochs": 100,
    "finetune.batch_size": 50,
    "finetune.fraction": 1.0,
    "finetune.optimizer.kind": "sgd",
    "finetune.optimizer.learning_rate": 0.01,
    "finetune.optimizer.momentum": 0.0,
    "synth.n_classes": 3,
    "synth.n_per_class": 40,
    "synth.sample_rate": 16000,
    "synth.clip_length_s": 1.0,
}


def flatten(table: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in table.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value):
    """Convert ``value`` (possibly a CLI string) to the type of the default."""
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value.lower() if isinstance(default, bool) else value)
        except json.JSONDecodeError:
            raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
    elif not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


class ExperimentConfig:
    """Validated flat mapping of dotted keys to values."""

    def __init__(self, values: dict | None = None, base_dir: Path | None = None):
        merged = dict(DEFAULTS)
        for k, v in (values or {}).items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
        self.values = merged
        self.base_dir = Path(base_dir) if base_dir else Path.cwd()
        self.validate()

    def __getitem__(self, key):
        return self.values[key]

    # -- loading -------------------------------------------------------------------
    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        values, base = {}, None
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                values = flatten(tomllib.loads(path.read_text()))
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            base = path.resolve().parent
        values.update(overrides or {})
        return cls(values, base)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        values = dict(self.values)
        values.update(overrides)
        return ExperimentConfig(values, self.base_dir)

    def validate(self) -> None:
        v = self.values
        if v["init.mode"] not in INIT_MODES:
            raise ConfigError(f"init.mode must be one of {INIT_MODES}, got {v['init.mode']!r}")
        if not 0 < v["finetune.fraction"] <= 1:
            raise ConfigError("finetune.fraction must be in (0, 1]")
        if not 0 < v["split.test_fraction"] < 1:
            raise ConfigError("split.test_fraction must be in (0, 1)")
        if v["split.k"] < 2:
            raise ConfigError("split.k must be at least 2")
        for key in ("ssl.batch_size", "finetune.batch_size"):
            if v[key] < 2:
                raise ConfigError(f"{key} must be at least 2")
        for key in ("ssl.epochs", "finetune.epochs"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be at least 1")
        if v["init.mode"] == "checkpoint" and not v["init.checkpoint"]:
            raise ConfigError("init.mode = 'checkpoint' requires init.checkpoint")
        try:
            self.optimizer("ssl"), self.optimizer("finetune")
            self.vicreg(), self.barlow()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def check_files(self) -> None:
        """Referenced files must exist (checked when a stage needs them).

        An unset path is a config error; a set path that does not exist is a data error.
        """
        if not self.values["data.manifest"]:
            raise ConfigError("data.manifest is not set")
        if not self.manifest_path.is_file():
            raise DataError(f"manifest not found: {self.manifest_path}")
        if self.values["init.mode"] == "checkpoint" and not self.resolve(self.values["init.checkpoint"]).is_file():
            raise DataError(f"init checkpoint not found: {self.values['init.checkpoint']}")

    # -- derived objects -------------------------------------------------------------
    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def manifest_path(self) -> Path:
        return self.resolve(self.values["data.manifest"])

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def spectrogram(self) -> SpectrogramConfig:
        v = self.values
        return SpectrogramConfig(
            v["data.sample_rate"], StftConfig(v["dsp.window_length"], v["dsp.hop_length"]),
            MelConfig(v["dsp.n_mels"], v["dsp.f_min"], v["dsp.f_max"] or None), v["dsp.n_frames"])

    def augment_stft(self) -> StftConfig:
        return StftConfig(self.values["augment.window_length"], self.values["augment.hop_length"],
                          center=True, pad_mode="constant")

    def grid(self) -> AugmentParamGrid:
        v = self.values
        return AugmentParamGrid(tuple(v["augment.stretch_factors"]), tuple(v["augment.pitch_steps_semitones"]),
                                tuple(v["augment.noise_levels_db"]))

    def encoder(self) -> EncoderConfig:
        shape = (1, self.values["dsp.n_mels"], self.values["dsp.n_frames"])
        desc = self.values["encoder.descriptor"]
        if desc == "reference":
            return reference_encoder_config(shape)
        text = desc if desc.lstrip().startswith("{") else self.resolve(desc).read_text()
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"encoder.descriptor: {exc}") from None
        d["input_shape"] = shape
        return EncoderConfig.from_dict(d)

    def projector(self) -> ProjectorConfig:
        return ProjectorConfig(self.values["projector.n_units"])

    def head(self, n_classes: int) -> HeadConfig:
        return HeadConfig(n_classes)

    def vicreg(self) -> VICRegConfig:
        v = self.values
        return VICRegConfig(v["loss.vicreg_lambda"], v["loss.vicreg_mu"], v["loss.vicreg_nu"],
                            v["loss.vicreg_gamma"], v["loss.vicreg_epsilon"])

    def barlow(self) -> BarlowTwinsConfig:
        return BarlowTwinsConfig(self.values["loss.bt_lambda"])

    def ssl_objective(self):
        """(objective name, loss config) for SSL init modes, else None."""
        mode = self.values["init.mode"]
        if mode == "ssl-vicreg":
            return "vicreg", self.vicreg()
        if mode == "ssl-barlow":
            return "barlow", self.barlow()
        return None

    def optimizer(self, stage: str) -> OptimizerConfig:
        v = self.values
        return OptimizerConfig(v[f"{stage}.optimizer.kind"], v[f"{stage}.optimizer.learning_rate"],
                               v[f"{stage}.optimizer.momentum"])

    # -- identity --------------------------------------------------------------------
    def canonical(self) -> str:
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def stage_digest(self, keys_prefixes) -> str:
        """Hash of the subset of keys a stage depends on."""
        sub = {k: v for k, v in self.values.items() if k == "seed" or k.startswith(tuple(keys_prefixes))}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()

    def to_toml(self) -> str:
        lines = []
        for k in sorted(self.values):
            lines.append(f"{json.dumps(k)} = {_toml_value(self.values[k])}")
        return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return json.dumps(v)
