"""Command line: train, eval, predict, scan, inspect, make-synthetic.

One JSON config file anchors an experiment; flags override config fields.
Exit codes: 0 success, 2 invalid config, 3 data errors, 4 corrupt model
file, 5 mask required by the model but not supplied. The PLANTSCAN_THREADS
environment variable caps scan parallelism (0 = serial, the default);
results are emitted in row-major tile order regardless.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geodata, report
from .geodata import AffineGeoref, geojson_polygons, rasterize_mask, read_world_file
from .models import (Model, ModelFormatError, ModelSpec, build_model, load_model,
                     save_model, summarize)
from .training import TrainConfig, evaluate, train, write_history

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MODEL_FORMAT = 4
EXIT_MASK_REQUIRED = 5


class ConfigError(Exception):
    """Invalid run configuration (exit 2)."""


class DataError(Exception):
    """Missing or unreadable data (exit 3)."""


class MaskRequiredError(Exception):
    """Model expects a mask channel but none was supplied (exit 5)."""


_TOP_KEYS = {"seed", "data_root", "split_fractions", "out_dir", "model", "train"}


@dataclass
class RunConfig:
    """One experiment: seed, data location, model spec, training knobs."""

    seed: int = 42
    data_root: str | None = None
    split_fractions: tuple = (0.7, 0.15, 0.15)
    out_dir: str = "plantscan-run"
    model_dict: dict = field(default_factory=dict)
    train_dict: dict = field(default_factory=dict)

    def model_spec(self, class_names: list[str] | None = None) -> ModelSpec:
        md = dict(self.model_dict)
        if class_names is not None:
            if "class_names" in md and list(md["class_names"]) != list(class_names):
                raise DataError(f"config class_names {md['class_names']} do not match "
                                f"dataset classes {class_names}")
            if "num_classes" in md and md["num_classes"] != len(class_names):
                raise DataError(f"config num_classes {md['num_classes']} does not match "
                                f"{len(class_names)} dataset classes")
            md["class_names"] = list(class_names)
            md["num_classes"] = len(class_names)
        return ModelSpec.from_dict(md)

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.train_dict)


def parse_run_config(path: str | None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown config fields: {', '.join(unknown)}")

    seed = raw.get("seed", 42)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    model_dict = raw.get("model", {})
    train_dict = raw.get("train", {})
    if not isinstance(model_dict, dict) or not isinstance(train_dict, dict):
        raise ConfigError("'model' and 'train' config sections must be objects")
    if "seed" in train_dict:
        raise ConfigError("set the seed at the top level, not inside 'train'")

    cfg = RunConfig(
        seed=seed,
        data_root=raw.get("data_root"),
        split_fractions=tuple(raw.get("split_fractions", (0.7, 0.15, 0.15))),
        out_dir=raw.get("out_dir", "plantscan-run"),
        model_dict=model_dict,
        train_dict=train_dict,
    )
    try:  # validate both sections eagerly so bad configs fail before any work
        cfg.model_spec()
        cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


@dataclass
class DetectionRecord:
    """One classified scan window with its georeferenced footprint."""

    footprint: list[list[float]]       # closed ring of [x, y]
    class_name: str
    class_index: int
    probabilities: dict[str, float]
    tile_origin: tuple[int, int]       # (col, row)
    georeferenced: bool

    def to_feature(self) -> dict:
        return {
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [self.footprint]},
            "properties": {
                "class": self.class_name,
                "class_index": self.class_index,
                "probability": self.probabilities[self.class_name],
                "probabilities": self.probabilities,
                "tile_origin": list(self.tile_origin),
                "georeferenced": self.georeferenced,
            },
        }


def _load_model_checked(path) -> Model:
    try:
        with open(path, "rb"):
            pass
    except OSError as exc:
        raise DataError(f"cannot read model file: {exc}") from exc
    return load_model(path)


def _load_dataset_checked(cfg: RunConfig, data_override: str | None,
                          image_size: tuple[int, int]):
    root = data_override or cfg.data_root
    if not root:
        raise ConfigError("no dataset: set data_root in the config or pass --data")
    try:
        return geodata.load_dataset(root, cfg.split_fractions, cfg.seed,
                                    image_size=image_size)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load dataset from {root}: {exc}") from exc


def _decode_checked(path) -> np.ndarray:
    try:
        return geodata.decode_image(path)
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def _probs_dict(spec: ModelSpec, probs: np.ndarray) -> dict[str, float]:
    return {name: float(p) for name, p in zip(spec.class_names, probs)}


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = parse_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    for flag, key in (("learning_rate", "learning_rate"), ("batch_size", "batch_size"),
                      ("max_epochs", "max_epochs"), ("patience", "patience")):
        value = getattr(args, flag)
        if value is not None:
            cfg.train_dict = {**cfg.train_dict, key: value}
    if args.kind is not None:
        cfg.model_dict = {**cfg.model_dict, "kind": args.kind}
    if args.augment:
        cfg.train_dict = {**cfg.train_dict, "augment": True}
    try:
        probe = cfg.model_spec()
        tcfg = cfg.train_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    dataset = _load_dataset_checked(cfg, args.data, (probe.height, probe.width))
    spec = cfg.model_spec(class_names=dataset.class_names)
    model = build_model(spec, seed=cfg.seed)

    try:
        model, history = train(model, dataset, tcfg)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, out_dir / "model.ppdm")
    write_history(history, out_dir / "history.jsonl")

    split = "test" if dataset.counts().get("test", 0) else "val"
    x_eval, y_eval = dataset.arrays(split, mask_channel=spec.mask_channel)
    bundle = evaluate(model, x_eval, y_eval)
    payload = bundle.to_dict()
    payload["split"] = split
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n",
                                          encoding="utf-8")
    report.plot_history(history, out_dir / "training_curves.png")
    report.plot_confusion(bundle.cm, out_dir / "confusion_matrix.png")

    last = history[-1]
    print(f"trained {spec.kind} for {last.epoch} epochs; "
          f"best val loss {min(r.val_loss for r in history):.4f}")
    print(f"{split} accuracy {bundle.accuracy:.4f}, loss {bundle.loss:.4f}")
    print(f"outputs in {out_dir}: model.ppdm, history.jsonl, metrics.json, "
          f"training_curves.png, confusion_matrix.png")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = parse_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    model = _load_model_checked(args.model)
    spec = model.spec
    dataset = _load_dataset_checked(cfg, args.data, (spec.height, spec.width))
    if dataset.class_names != spec.class_names:
        raise DataError(f"dataset classes {dataset.class_names} do not match "
                        f"model classes {spec.class_names}")
    x, y = dataset.arrays(args.split, mask_channel=spec.mask_channel)
    if x.shape[0] == 0:
        raise DataError(f"split '{args.split}' is empty")
    bundle = evaluate(model, x, y)
    payload = bundle.to_dict()
    payload["split"] = args.split

    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.json").write_text(json.dumps(payload, indent=2) + "\n",
                                          encoding="utf-8")
    report.plot_confusion(bundle.cm, out_dir / "confusion_matrix.png")
    print(f"{args.split} accuracy {bundle.accuracy:.4f}, loss {bundle.loss:.4f}")
    print(f"outputs in {out_dir}: metrics.json, confusion_matrix.png")
    return EXIT_OK


def _prepare_tile_input(model: Model, pixels01: np.ndarray,
                        world_path, mask_path) -> np.ndarray:
    """Resize to the model's input and attach the mask channel if expected."""
    spec = model.spec
    in_h, in_w = pixels01.shape[:2]
    out_h, out_w = spec.height, spec.width
    resized = pixels01
    if (in_h, in_w) != (out_h, out_w):
        resized = geodata.resize_bilinear(pixels01, out_h, out_w).astype(np.float32)
        np.clip(resized, 0.0, 1.0, out=resized)
    if not spec.mask_channel:
        return resized
    if mask_path is None:
        raise MaskRequiredError(
            "model expects a mask channel; pass --mask <polygons.geojson>")
    georef = read_world_file(world_path) if world_path else AffineGeoref.identity()
    if (in_h, in_w) != (out_h, out_w):
        georef = geodata.scale_georef(georef, in_h, in_w, out_h, out_w)
    try:
        mask = geodata.load_mask(mask_path, georef, out_h, out_w)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load mask {mask_path}: {exc}") from exc
    return np.concatenate([resized, mask], axis=2)


def cmd_predict(args) -> int:
    model = _load_model_checked(args.model)
    raw = _decode_checked(args.image)
    pixels = raw.astype(np.float32) / 255.0
    x = _prepare_tile_input(model, pixels, args.world, args.mask)
    probs = model.forward(x[None])[0]
    idx = int(np.argmax(probs))
    result = {
        "class": model.spec.class_names[idx],
        "class_index": idx,
        "probabilities": _probs_dict(model.spec, probs),
    }
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def _thread_count() -> int:
    raw = os.environ.get("PLANTSCAN_THREADS", "0")
    try:
        return max(0, int(raw))
    except ValueError:
        print(f"warning: ignoring non-integer PLANTSCAN_THREADS={raw!r}",
              file=sys.stderr)
        return 0


def cmd_scan(args) -> int:
    model = _load_model_checked(args.model)
    spec = model.spec
    raw = _decode_checked(args.raster)
    raster = raw.astype(np.float32) / 255.0
    h, w = raster.shape[:2]
    tile = args.tile if args.tile is not None else spec.height
    stride = args.stride if args.stride is not None else tile
    if tile < 1 or stride < 1:
        raise ConfigError(f"tile and stride must be positive, got {tile}/{stride}")
    if h < tile or w < tile:
        raise DataError(f"raster {h}x{w} is smaller than the {tile}px tile")

    world_path = Path(args.world) if args.world else Path(args.raster).with_suffix(".wld")
    georef = None
    if world_path.exists():
        try:
            georef = read_world_file(world_path)
        except ValueError as exc:
            raise DataError(f"bad world file {world_path}: {exc}") from exc

    mask_geoms = None
    if spec.mask_channel:
        if args.mask is None:
            raise MaskRequiredError(
                "model expects a mask channel; pass --mask <polygons.geojson>")
        try:
            with open(args.mask, "r", encoding="utf-8") as fh:
                mask_geoms = geojson_polygons(json.load(fh))
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot load mask {args.mask}: {exc}") from exc

    footprint_ref = georef if georef is not None else AffineGeoref.identity()
    mask_ref = footprint_ref  # mask coords are pixel coords when no world file
    origins = [(c0, r0)
               for r0 in range(0, h - tile + 1, stride)
               for c0 in range(0, w - tile + 1, stride)]

    def window_input(origin):
        c0, r0 = origin
        win = raster[r0:r0 + tile, c0:c0 + tile]
        if (tile, tile) != (spec.height, spec.width):
            win = geodata.resize_bilinear(win, spec.height, spec.width).astype(np.float32)
            np.clip(win, 0.0, 1.0, out=win)
        if not spec.mask_channel:
            return win
        wref = AffineGeoref(mask_ref.a, mask_ref.d, mask_ref.b, mask_ref.e,
                            *mask_ref.pixel_to_map(c0, r0))
        if (tile, tile) != (spec.height, spec.width):
            wref = geodata.scale_georef(wref, tile, tile, spec.height, spec.width)
        mask = rasterize_mask(mask_geoms, wref, spec.height, spec.width)
        return np.concatenate([win, mask], axis=2)

    def classify(origin):
        return model.forward(window_input(origin)[None])[0]

    threads = _thread_count()
    if threads > 1 and len(origins) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            all_probs = list(pool.map(classify, origins))
    else:
        all_probs = [classify(origin) for origin in origins]

    records = []
    for (c0, r0), probs in zip(origins, all_probs):
        top = float(np.max(probs))
        if top < args.threshold:
            continue
        idx = int(np.argmax(probs))
        corners = [(c0 - 0.5, r0 - 0.5), (c0 + tile - 0.5, r0 - 0.5),
                   (c0 + tile - 0.5, r0 + tile - 0.5), (c0 - 0.5, r0 + tile - 0.5)]
        ring = []
        for col, row in corners:
            x, y = footprint_ref.pixel_to_map(col, row)
            ring.append([float(x), float(y)])
        ring.append(list(ring[0]))
        records.append(DetectionRecord(
            footprint=ring,
            class_name=spec.class_names[idx],
            class_index=idx,
            probabilities=_probs_dict(spec, probs),
            tile_origin=(c0, r0),
            georeferenced=georef is not None,
        ))

    collection = {
        "type": "FeatureCollection",
        "features": [rec.to_feature() for rec in records],
    }
    if georef is None:
        collection["warning"] = ("no world file found; footprints are in pixel "
                                 "coordinates")
        print(f"warning: {collection['warning']}", file=sys.stderr)
    text = json.dumps(collection, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        print(f"{len(records)} detections written to {args.out}")
    else:
        print(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = _load_model_checked(args.model)
    print(summarize(model))
    print(f"kind: {model.spec.kind}")
    print(f"classes: {', '.join(model.spec.class_names)}")
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    out = geodata.make_synthetic(args.out, seed=args.seed if args.seed is not None else 42,
                                 per_class=args.per_class, size=args.size)
    n_classes = len(geodata.SYNTHETIC_CLASSES)
    print(f"wrote {n_classes} classes x {args.per_class} images ({args.size}px) to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- wiring

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plantscan",
        description="Power-plant tile classification: CNN, ViT, and mask-aware hybrid.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", help="dataset root (overrides config data_root)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--kind", choices=("cnn", "vit", "hybrid"), help="model kind override")
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--augment", action="store_true", help="enable training augmentation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on a dataset split")
    p.add_argument("model", help="path to a .ppdm model file")
    p.add_argument("--config", help="JSON run config (for data_root etc.)")
    p.add_argument("--data", help="dataset root")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--seed", type=int, help="split seed override")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image tile")
    p.add_argument("model")
    p.add_argument("image")
    p.add_argument("--mask", help="GeoJSON polygons for the mask channel")
    p.add_argument("--world", help="world file for the image")
    p.add_argument("--out", help="write the JSON result here too")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("scan", help="slide a window over a raster, emit GeoJSON")
    p.add_argument("model")
    p.add_argument("raster")
    p.add_argument("--world", help="world file (default: raster path with .wld)")
    p.add_argument("--mask", help="GeoJSON polygons if the model expects a mask")
    p.add_argument("--tile", type=int, help="window size in pixels (default: model input)")
    p.add_argument("--stride", type=int, help="window step (default: tile size)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="emit only windows with max probability >= this")
    p.add_argument("--out", help="write the FeatureCollection here")
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("inspect", help="print a saved model's layer table")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("make-synthetic", help="generate the procedural dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--per-class", dest="per_class", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_make_synthetic)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MODEL_FORMAT
    except MaskRequiredError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MASK_REQUIRED


if __name__ == "__main__":
    sys.exit(main())
