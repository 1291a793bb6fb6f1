"""Command-line entry points and run orchestration.

Configuration is a flat key-value document. Precedence, weakest first:
built-in defaults, values from --config FILE (JSON), command-line flags,
then the LODISC_SEED environment variable for the seed. Every run writes
a config-resolution record next to its artifacts so it can be replayed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import rng as rng_mod
from .augment import AugmentConfig
from .data import Dataset, DatasetError, SyntheticSpec, denormalize_to_rgb, ingest, write_ppm
from .evaluate import ProbeConfig, extract_features, linear_probe, retrieve
from .heads import DualEncoder, HeadConfig
from .masking import apply_mask, baseline_mask, fuse_all, mask_record, select_pivotal
from .pipeline import CheckpointError, Trainer, TrainConfig, load_encoder
from .tensor import ConfigError, ContractError, DimensionError, NumericError, Tensor
from .vit import ViTConfig

__all__ = ["main", "DEFAULTS", "resolve_config", "config_hash"]

COMMANDS = ("pretrain", "probe", "retrieve", "dump-masks", "sweep")

SWEEP_RATIOS = (0.3, 0.6, 0.7, 0.8)

DEFAULTS: dict = {
    # run
    "out": "runs/out",
    "data": "synthetic",
    "seed": 0,
    "checkpoint": "",
    # backbone
    "image_size": 32,
    "patch_size": 8,
    "channels": 3,
    "embed_dim": 64,
    "layers": 4,
    "heads": 4,
    "mlp_ratio": 4.0,
    # heads
    "hidden_dim": 256,
    "out_dim": 64,
    "projection_layers": 3,
    "prediction_layers": 2,
    # training
    "batch_size": 32,
    "epochs": 30,
    "lr_max": 1e-3,
    "lr_min": 1e-5,
    "weight_decay": 0.1,
    "momentum": 0.99,
    "temperature": 0.2,
    "masking_ratio": 0.7,
    "strategy": "location",
    "save_every": 10,
    # augmentation
    "crop_scale_min": 0.5,
    "crop_scale_max": 1.0,
    "flip_prob": 0.5,
    "jitter_strength": 0.4,
    "grayscale_prob": 0.1,
    # synthetic data
    "num_classes": 2,
    "images_per_class": 128,
    "test_images_per_class": 64,
    "noise_sigma": 0.15,
    "distinct_classes": True,
    # linear probe
    "probe_lr": 0.5,
    "probe_epochs": 100,
    "probe_batch_size": 256,
    "probe_weight_decay": 0.0,
    "probe_momentum": 0.9,
    # retrieval pairing
    "query_split": "test",
    "gallery_split": "train",
    # mask dumps
    "num_views": 8,
    "dump_split": "test",
}


def _str2bool(v: str) -> bool:
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {v!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lodisc",
                                     description="Global-local self-supervised pretraining and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="JSON file with flat key-value overrides")
        for key, default in DEFAULTS.items():
            if isinstance(default, bool):
                p.add_argument(f"--{key}", type=_str2bool, default=None)
            else:
                p.add_argument(f"--{key}", type=type(default), default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> tuple[dict, dict]:
    """Merge defaults, config file, flags, and environment.

    Returns (resolved, record); the record preserves each layer so a run
    can be replayed exactly.
    """
    resolved = dict(DEFAULTS)
    file_layer: dict = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            file_layer = json.load(fh)
        unknown = set(file_layer) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys in {args.config}: {sorted(unknown)}")
        resolved.update(file_layer)
    flag_layer = {k: getattr(args, k) for k in DEFAULTS if getattr(args, k, None) is not None}
    resolved.update(flag_layer)
    env_layer: dict = {}
    if os.environ.get("LODISC_SEED"):
        env_layer["seed"] = int(os.environ["LODISC_SEED"])
        resolved.update(env_layer)
    record = {"defaults": DEFAULTS, "file": file_layer, "flags": flag_layer,
              "env": env_layer, "resolved": resolved}
    return resolved, record


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


# -- config to objects --------------------------------------------------------


def _vit_config(r: dict) -> ViTConfig:
    return ViTConfig(image_size=r["image_size"], patch_size=r["patch_size"],
                     channels=r["channels"], embed_dim=r["embed_dim"],
                     layers=r["layers"], heads=r["heads"], mlp_ratio=r["mlp_ratio"])


def _head_config(r: dict) -> HeadConfig:
    return HeadConfig(hidden_dim=r["hidden_dim"], out_dim=r["out_dim"],
                      projection_layers=r["projection_layers"],
                      prediction_layers=r["prediction_layers"])


def _train_config(r: dict) -> TrainConfig:
    return TrainConfig(batch_size=r["batch_size"], epochs=r["epochs"], lr_max=r["lr_max"],
                       lr_min=r["lr_min"], weight_decay=r["weight_decay"], momentum=r["momentum"],
                       temperature=r["temperature"], masking_ratio=r["masking_ratio"],
                       strategy=r["strategy"], seed=r["seed"])


def _augment_config(r: dict) -> AugmentConfig:
    return AugmentConfig(crop_scale_range=(r["crop_scale_min"], r["crop_scale_max"]),
                         flip_prob=r["flip_prob"], jitter_strength=r["jitter_strength"],
                         grayscale_prob=r["grayscale_prob"], seed=r["seed"])


def _fresh_encoder(r: dict) -> DualEncoder:
    return DualEncoder(_vit_config(r), _head_config(r), momentum=r["momentum"],
                       rng=rng_mod.stream(r["seed"], "init"))


def _encoder(r: dict) -> DualEncoder:
    if r["checkpoint"]:
        return load_encoder(r["checkpoint"])
    return _fresh_encoder(r)


def _train_dataset(r: dict) -> Dataset:
    if r["data"] == "synthetic":
        return ingest(SyntheticSpec(num_classes=r["num_classes"],
                                    images_per_class=r["images_per_class"],
                                    image_size=r["image_size"],
                                    noise_sigma=r["noise_sigma"],
                                    seed=r["seed"],
                                    distinct_classes=r["distinct_classes"]))
    return ingest(Path(r["data"]) / "train", image_size=r["image_size"])


def _both_datasets(r: dict) -> tuple[Dataset, Dataset]:
    train = _train_dataset(r)
    if r["data"] == "synthetic":
        test = ingest(SyntheticSpec(num_classes=r["num_classes"],
                                    images_per_class=r["test_images_per_class"],
                                    image_size=r["image_size"],
                                    noise_sigma=r["noise_sigma"],
                                    seed=r["seed"] + 1,
                                    distinct_classes=r["distinct_classes"]),
                      stats=train.stats)
    else:
        test = ingest(Path(r["data"]) / "test", image_size=r["image_size"], stats=train.stats)
    return train, test


def _write_report(out: Path, name: str, resolved: dict, *, top1=None, top5=None,
                  rank1=None, rank5=None, map_=None, excluded=None) -> Path:
    report = {"top1": top1, "top5": top5, "rank1": rank1, "rank5": rank5,
              "map": map_, "excluded_queries": excluded,
              "config_hash": config_hash(resolved)}
    path = out / f"report-{name}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    return path


# -- commands -----------------------------------------------------------------


def _cmd_pretrain(resolved: dict, out: Path, record: dict) -> int:
    train_ds = _train_dataset(resolved)
    if resolved["checkpoint"]:
        explicit_epochs = ("epochs" in record["flags"] or "epochs" in record["file"])
        trainer = Trainer.load_checkpoint(resolved["checkpoint"], train_ds,
                                          epochs=resolved["epochs"] if explicit_epochs else None)
    else:
        trainer = Trainer(_fresh_encoder(resolved), train_ds,
                          _train_config(resolved), _augment_config(resolved))
    trainer.run(out_dir=out, save_every=resolved["save_every"])
    return 0


def _cmd_probe(resolved: dict, out: Path, record: dict) -> int:
    train_ds, test_ds = _both_datasets(resolved)
    dual = _encoder(resolved)
    banks = {"train": extract_features(train_ds, dual, "train"),
             "test": extract_features(test_ds, dual, "test")}
    probe_cfg = ProbeConfig(lr=resolved["probe_lr"], epochs=resolved["probe_epochs"],
                            batch_size=resolved["probe_batch_size"],
                            weight_decay=resolved["probe_weight_decay"],
                            momentum=resolved["probe_momentum"], seed=resolved["seed"])
    scores = linear_probe(banks["train"], banks["test"], probe_cfg)
    _write_report(out, "probe", resolved, top1=scores["top1"], top5=scores["top5"])
    return 0


def _cmd_retrieve(resolved: dict, out: Path, record: dict) -> int:
    train_ds, test_ds = _both_datasets(resolved)
    dual = _encoder(resolved)
    banks = {"train": extract_features(train_ds, dual, "train"),
             "test": extract_features(test_ds, dual, "test")}
    query = banks[resolved["query_split"]]
    gallery = banks[resolved["gallery_split"]]
    report = retrieve(query, gallery)
    _write_report(out, "retrieve", resolved, rank1=report.rank1, rank5=report.rank5,
                  map_=report.map, excluded=report.excluded_queries)
    return 0


def _cmd_dump_masks(resolved: dict, out: Path, record: dict) -> int:
    train_ds, test_ds = _both_datasets(resolved)
    ds = test_ds if resolved["dump_split"] == "test" else train_ds
    dual = _encoder(resolved)
    strategy = resolved["strategy"]
    if strategy == "none":
        strategy = "location"
    masks_dir = out / "masks"
    masks_dir.mkdir(parents=True, exist_ok=True)
    n = min(resolved["num_views"], len(ds))
    images = ds.images[:n]
    _, attn = dual.encode_key_with_attention(Tensor(images))
    fused = fuse_all(attn)
    gen = rng_mod.stream(resolved["seed"], "dump-masks")
    for i in range(n):
        if strategy == "location":
            mask = select_pivotal(fused[i], resolved["masking_ratio"])
        else:
            mask = baseline_mask(strategy, dual.vit_cfg, resolved["masking_ratio"], gen)
        masked = apply_mask(mask, images[i], dual.vit_cfg)
        write_ppm(masks_dir / f"view-{i:05d}.ppm", denormalize_to_rgb(ds, masked))
        with open(masks_dir / f"view-{i:05d}.json", "w", encoding="utf-8") as fh:
            json.dump(mask_record(mask, i), fh, indent=2)
            fh.write("\n")
    return 0


def _cmd_sweep(resolved: dict, out: Path, record: dict) -> int:
    for ratio in SWEEP_RATIOS:
        sub = dict(resolved)
        sub["masking_ratio"] = ratio
        sub["strategy"] = "location"
        sub_out = out / f"sweep-r{ratio}"
        sub_out.mkdir(parents=True, exist_ok=True)
        train_ds, test_ds = _both_datasets(sub)
        trainer = Trainer(_fresh_encoder(sub), train_ds, _train_config(sub),
                          _augment_config(sub))
        trainer.run(out_dir=sub_out, save_every=sub["save_every"])
        banks = {"train": extract_features(train_ds, trainer.dual, "train"),
                 "test": extract_features(test_ds, trainer.dual, "test")}
        probe_cfg = ProbeConfig(lr=sub["probe_lr"], epochs=sub["probe_epochs"],
                                batch_size=sub["probe_batch_size"],
                                weight_decay=sub["probe_weight_decay"],
                                momentum=sub["probe_momentum"], seed=sub["seed"])
        scores = linear_probe(banks["train"], banks["test"], probe_cfg)
        ret = retrieve(banks[sub["query_split"]], banks[sub["gallery_split"]])
        _write_report(out, f"sweep-{ratio}", sub, top1=scores["top1"], top5=scores["top5"],
                      rank1=ret.rank1, rank5=ret.rank5, map_=ret.map,
                      excluded=ret.excluded_queries)
    return 0


_DISPATCH = {
    "pretrain": _cmd_pretrain,
    "probe": _cmd_probe,
    "retrieve": _cmd_retrieve,
    "dump-masks": _cmd_dump_masks,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        resolved, record = resolve_config(args)
        out = Path(resolved["out"])
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "config-resolution.json", "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return _DISPATCH[args.command](resolved, out, record)
    except (ConfigError, ContractError, DimensionError, NumericError,
            DatasetError, CheckpointError, OSError, ValueError) as exc:
        print(f"lodisc: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
