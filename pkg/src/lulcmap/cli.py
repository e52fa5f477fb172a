"""Command-line surface: train, eval, map, gradcheck, import-weights.

Every run is driven by a strict JSON config (unknown keys rejected, field
paths named in errors) and a single seed that feeds named substreams for
init, split, shuffle, augmentation and dropout.  Exit codes: 0 success,
2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geo, gradcheck, optim, rng, vit, weights
from .data import (
    LabeledDataset, Preprocessor, SplitSpec, dataset_statistics, load_dataset, split,
)
from .errors import ConfigError, DataError, LulcmapError, NumericalError
from .optim import LRSchedule, TrainConfig

CONFIG_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


@dataclass
class DataConfig:
    root: str = ""
    image_size: int = 64
    train_fraction: float = 0.8
    stratified: bool = False
    augment: bool = False
    normalization: dict | str = "dataset"
    resize_to: int | None = None


@dataclass
class RunConfig:
    """Union of model, training and data settings plus the run seed;
    echoed verbatim into every report for reproducibility."""

    version: int
    seed: int
    model: vit.ViTConfig
    train: TrainConfig
    data: DataConfig
    resolved_normalization: dict | None = field(default=None, repr=False)

    def echo(self) -> dict:
        train_doc = self.train.to_dict()
        train_doc.pop("seed")  # the root seed is the single source
        doc = {
            "version": self.version,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": train_doc,
            "data": {
                "root": self.data.root,
                "image_size": self.data.image_size,
                "train_fraction": self.data.train_fraction,
                "stratified": self.data.stratified,
                "augment": self.data.augment,
                "normalization": self.resolved_normalization or self.data.normalization,
                "resize_to": self.data.resize_to,
            },
        }
        return doc


def _take(section: dict, path: str, known: set[str]) -> None:
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r} in section {path!r} "
                          f"(known: {sorted(known)})")


def _parse_schedule(doc: dict) -> LRSchedule:
    _take(doc, "train.schedule", {"kind", "milestones", "gamma"})
    return LRSchedule(kind=doc.get("kind", "constant"),
                      milestones=tuple(doc.get("milestones", ())),
                      gamma=doc.get("gamma", 0.1))


def parse_run_config(doc: dict) -> RunConfig:
    """Strict parse of the run-config JSON document."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    _take(doc, "<root>", {"version", "seed", "model", "train", "data"})
    version = doc.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    model_doc = dict(doc.get("model", {}))
    _take(model_doc, "model", {"image_size", "patch_size", "embed_dim", "num_heads",
                               "num_layers", "mlp_ratio", "dropout_p", "num_classes"})
    try:
        model = vit.ViTConfig(**model_doc)
    except TypeError as exc:
        raise ConfigError(f"model section: {exc}") from exc

    train_doc = dict(doc.get("train", {}))
    _take(train_doc, "train", {"learning_rate", "schedule", "clip_norm", "weight_decay",
                               "dropout_p", "batch_size", "max_epochs", "early_stop_patience"})
    schedule = _parse_schedule(train_doc.pop("schedule", {}))
    train = TrainConfig(schedule=schedule, seed=seed, **train_doc)

    data_doc = dict(doc.get("data", {}))
    _take(data_doc, "data", {"root", "image_size", "train_fraction", "stratified",
                             "augment", "normalization", "resize_to"})
    data = DataConfig(**data_doc)
    if not 0.0 < data.train_fraction < 1.0:
        raise ConfigError(f"data.train_fraction must be in (0, 1), got {data.train_fraction}")
    if isinstance(data.normalization, dict):
        _take(data.normalization, "data.normalization", {"mean", "std"})
        for key in ("mean", "std"):
            values = data.normalization.get(key)
            if not isinstance(values, list) or len(values) != 3:
                raise ConfigError(f"data.normalization.{key} must be a list of 3 numbers")
    elif data.normalization != "dataset":
        raise ConfigError(
            f"data.normalization must be 'dataset' or {{mean, std}}, got {data.normalization!r}"
        )
    return RunConfig(version=version, seed=seed, model=model, train=train, data=data)


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_run_config(doc)


def _resolve_preprocessor(config: RunConfig, train_set: LabeledDataset) -> Preprocessor:
    if config.data.normalization == "dataset":
        stats = dataset_statistics(train_set)
    else:
        stats = config.data.normalization
    config.resolved_normalization = {"mean": list(stats["mean"]), "std": list(stats["std"])}
    resize_to = config.data.resize_to
    if resize_to is None and config.model.image_size != config.data.image_size:
        resize_to = config.model.image_size
    return Preprocessor(mean=tuple(stats["mean"]), std=tuple(stats["std"]), resize_to=resize_to)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    config = load_run_config(args.config)
    if args.seed is not None:
        config = parse_run_config({**json.loads(Path(args.config).read_text()), "seed": args.seed})
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)

    dataset = load_dataset(config.data.root, image_size=config.data.image_size)
    spec = SplitSpec(train_fraction=config.data.train_fraction,
                     seed=rng.substream_seed(config.seed, "split"),
                     stratified=config.data.stratified)
    train_set, val_set = split(dataset, spec)
    preprocess = _resolve_preprocessor(config, train_set)
    model = vit.init_model(config.model, seed=rng.substream_seed(config.seed, "init"))

    report = optim.train(model, train_set, val_set, config.train, preprocess,
                         augment_enabled=config.data.augment, config_echo=config.echo())
    report_path = out_dir / "report.json"
    checkpoint_path = out_dir / "best.vitlulc"
    optim.emit_report(report, report_path)
    weights.save_checkpoint(model, checkpoint_path, extra_meta={"run_config": config.echo()})
    print(f"trained {report.epochs_trained} epochs in {report.total_time_sec:.1f}s, "
          f"val accuracy {report.final_val_accuracy:.4f}")
    print(f"wrote {report_path} and {checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    stored = weights.checkpoint_config(args.checkpoint)
    if stored is not None and stored != config.model:
        raise ConfigError(
            f"checkpoint was written for model config {stored.to_dict()}, "
            f"but the run config specifies {config.model.to_dict()}"
        )
    model = weights.load_checkpoint(args.checkpoint, config.model, strict=True)
    dataset = load_dataset(args.data or config.data.root, image_size=config.data.image_size)
    if args.split == "test":
        spec = SplitSpec(train_fraction=config.data.train_fraction,
                         seed=rng.substream_seed(config.seed, "split"),
                         stratified=config.data.stratified)
        _, dataset = split(dataset, spec)
    if isinstance(config.data.normalization, dict):
        stats = config.data.normalization
    else:
        raise ConfigError("eval needs explicit data.normalization statistics "
                          "(echoed in the training report) rather than 'dataset'")
    preprocess = Preprocessor(mean=tuple(stats["mean"]), std=tuple(stats["std"]),
                              resize_to=config.data.resize_to
                              if config.data.resize_to is not None
                              else (config.model.image_size
                                    if config.model.image_size != config.data.image_size else None))
    accuracy, cm = optim.evaluate(model, dataset, preprocess, batch_size=config.train.batch_size)
    doc = {
        "model": "vit",
        "dataset_size": cm.total,
        "accuracy": accuracy,
        "per_class_accuracy": cm.per_class_accuracy(),
        "confusion_matrix": cm.to_lists(),
        "config": config.echo(),
    }
    out_path = Path(args.out or "eval_report.json")
    out_path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(f"accuracy {accuracy:.4f} over {cm.total} samples")
    print(f"wrote {out_path}")
    return EXIT_OK


def cmd_map(args) -> int:
    config = load_run_config(args.config)
    model = weights.load_checkpoint(args.checkpoint, config.model, strict=True)
    raster = geo.read_scene(args.scene)
    boundary = None
    if args.boundary:
        try:
            boundary = json.loads(Path(args.boundary).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read boundary {args.boundary}: {exc}") from exc
    if isinstance(config.data.normalization, dict):
        stats = config.data.normalization
    else:
        raise ConfigError("map needs explicit data.normalization statistics in the config")
    resize_to = config.model.image_size if config.model.image_size != geo.TILE_SIZE else None
    preprocess = Preprocessor(mean=tuple(stats["mean"]), std=tuple(stats["std"]), resize_to=resize_to)
    classifier = geo.ModelTileClassifier(model=model, preprocess=preprocess)
    grid = geo.tile(raster, boundary)
    grid = geo.classify_tiles(grid, raster, classifier, batch_size=args.batch_size,
                              num_classes=model.config.num_classes, threads=args.threads)
    paths = geo.write_map_artifacts(grid, args.out)
    active = grid.active()
    print(f"classified {len(active)} tiles ({grid.rows}x{grid.cols} grid, "
          f"{len(grid.tiles) - len(active)} excluded)")
    for name, p in paths.items():
        print(f"wrote {p}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.config:
        config = load_run_config(args.config).model
    else:
        config = vit.ViTConfig.tiny_test()
    precisions = {"32": [np.float32], "64": [np.float64], "both": [np.float32, np.float64]}
    failed = False
    worst_line = ""
    for dtype in precisions[args.precision]:
        result = gradcheck.check_model_gradients(config, dtype=dtype, step=args.step,
                                                 seed=args.seed, threshold=args.threshold)
        print(result.summary())
        if not result.passed:
            failed = True
            worst_line = f"worst parameter: {result.worst} ({result.per_tensor[result.worst]:.3e})"
    if failed:
        raise NumericalError(f"gradient check failed; {worst_line}")
    return EXIT_OK


def cmd_import_weights(args) -> int:
    config = load_run_config(args.config)
    archive = weights.read_archive(args.source)
    model, report = weights.import_archive(archive, config.model, strict=False)
    weights.save_checkpoint(model, args.out, extra_meta={"imported_from": str(args.source)})
    print(report.summary())
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lulcmap",
                                     description="LULC scene classification and mapping")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model from a run config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_train.add_argument("--out", default=None, help="output directory (report + checkpoint)")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--data", default=None, help="dataset root (default: config data.root)")
    p_eval.add_argument("--split", choices=["all", "test"], default="all",
                        help="evaluate everything or the seeded hold-out split")
    p_eval.add_argument("--out", default=None, help="report path")

    p_map = sub.add_parser("map", help="tile, classify and color-map a scene")
    p_map.add_argument("--checkpoint", required=True)
    p_map.add_argument("--config", required=True)
    p_map.add_argument("--scene", required=True, help="scene image (.png/.ppm) with .wld/.crs sidecars")
    p_map.add_argument("--boundary", default=None, help="GeoJSON polygon in the scene CRS")
    p_map.add_argument("--out", required=True, help="output prefix for map artifacts")
    p_map.add_argument("--batch-size", type=int, default=32)
    p_map.add_argument("--threads", type=int, default=1)

    p_gc = sub.add_parser("gradcheck", help="validate gradients against finite differences")
    p_gc.add_argument("--config", default=None, help="run config (default: built-in tiny model)")
    p_gc.add_argument("--precision", choices=["32", "64", "both"], default="both")
    p_gc.add_argument("--step", type=float, default=gradcheck.DEFAULT_STEP)
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--threshold", type=float, default=None,
                      help="override the per-precision default threshold")

    p_iw = sub.add_parser("import-weights", help="non-strict import of a pretrained archive")
    p_iw.add_argument("--source", required=True)
    p_iw.add_argument("--config", required=True)
    p_iw.add_argument("--out", required=True)

    return parser


_HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "map": cmd_map,
    "gradcheck": cmd_gradcheck,
    "import-weights": cmd_import_weights,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except LulcmapError as exc:
        print(f"error[internal]: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
