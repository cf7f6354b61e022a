"""Command-line entry point: ``soundssl {synth,prepare,pretrain,finetune,evaluate,compare}``.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig
from .dataset import DataError, default_recipes, synth_corpus
from .eval import paired_ttest, write_json
from .pipeline import MissingStageError, Run
from .tensor import NonFiniteError
from .tensor.checkpoint import CheckpointError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_PATH_KEYS = ("data.manifest", "init.checkpoint")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file (flat dotted keys or tables)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, default=Path("runs"), help="output root directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set ssl.epochs=10")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="soundssl", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic corpus and manifest to --out")
    sub.add_parser("prepare", parents=[common], help="cache spectrograms and write the split plan")
    sub.add_parser("pretrain", parents=[common], help="SSL pretraining per fold (ssl-* init modes)")
    sub.add_parser("finetune", parents=[common], help="fine-tune a classifier per fold")
    sub.add_parser("evaluate", parents=[common], help="test metrics, features and silhouette")
    cmp_ = sub.add_parser("compare", parents=[common], help="paired t-test between two evaluated runs")
    cmp_.add_argument("runs", nargs=2, type=Path, help="two run directories (or metrics.json files)")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = key.strip(), value.strip()
        if key in _PATH_KEYS and value and not Path(value).is_absolute():
            value = str(Path(value).resolve())  # command-line paths are relative to the cwd
        out[key] = value
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _load_metrics(path: Path) -> dict:
    path = path / "metrics.json" if path.is_dir() else path
    if not path.is_file():
        raise MissingStageError("evaluate", "compare", f"{path} not found")
    return json.loads(path.read_text())


def cmd_synth(cfg: ExperimentConfig, out: Path) -> dict:
    recipes = default_recipes(cfg["synth.n_classes"], cfg["synth.sample_rate"])
    manifest = synth_corpus(recipes, cfg["synth.n_per_class"], out, cfg.seed,
                            cfg["synth.sample_rate"], cfg["synth.clip_length_s"])
    return {"manifest": str(out / "manifest.csv"), "clips": len(manifest), "classes": list(manifest.classes)}


def cmd_compare(a: Path, b: Path, out: Path) -> dict:
    ma, mb = _load_metrics(a), _load_metrics(b)
    fa, fb = ma["fold_balanced_accuracy"], mb["fold_balanced_accuracy"]
    if len(fa) != len(fb):
        raise DataError(f"runs have different fold counts ({len(fa)} vs {len(fb)})")
    test = paired_ttest(fa, fb)
    report = {"a": {"init_mode": ma["init_mode"], "config_hash": ma["config_hash"], "folds": fa},
              "b": {"init_mode": mb["init_mode"], "config_hash": mb["config_hash"], "folds": fb},
              "ttest": test.to_dict()}
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / f"compare-{ma['config_hash'][:8]}-{mb['config_hash'][:8]}.json", report)
    return report


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config, _overrides(args))
        if args.command == "synth":
            result = cmd_synth(cfg, args.out)
        elif args.command == "compare":
            result = cmd_compare(args.runs[0], args.runs[1], args.out)
        else:
            run = Run(cfg, args.out)
            result = getattr(run, args.command)()
            result = {"run_dir": str(run.dir), **(result or {})}
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingStageError, DataError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
