"""Flat key=value configuration: parsing, validation, model/train assembly.

File syntax: one `key = value` per line, `#` starts a comment.  Tuples are
comma-separated.  Every key has a documented default; unknown keys and
malformed values are validation errors (CLI exit code 1).
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import PyramidConfig
from .decoder import DecoderConfig
from .losses import LossWeights
from .model import DetectorConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_tuple(s: str) -> tuple:
    return tuple(int(x) for x in s.replace("(", "").replace(")", "").split(","))


def _opt_int_tuple(s: str):
    return None if s.strip().lower() == "none" else _int_tuple(s)


# key -> (default, parser, help)
SCHEMA = {
    "data.n_train": (500, int, "training images to generate"),
    "data.n_val": (100, int, "validation images to generate"),
    "data.image_size": (64, int, "square image side in pixels"),
    "data.seed": (0, int, "dataset generation seed (val split uses seed+1)"),
    "model.channels": ((16, 32, 64, 128), _int_tuple, "stage widths"),
    "model.depths": ((1, 1, 1, 1), _int_tuple, "transformer blocks per stage"),
    "model.heads": ((1, 2, 4, 8), _int_tuple, "attention heads per stage"),
    "model.patch_strides": ((4, 2, 2, 2), _int_tuple, "patch-embed strides (2 or 4)"),
    "model.expansion": (4.0, float, "stage feed-forward expansion ratio"),
    "model.pool": (7, int, "spatial-reduction pooling size P"),
    "model.fuse_width": (32, int, "fused-map channel width"),
    "model.fuse_depth": (2, int, "fusing layers per fusing stage"),
    "model.fuse_start_lvl": (1, int, "first stage (1-based) that gets fused"),
    "model.fuse_expansion": (4.0, float, "fusing feed-forward expansion ratio"),
    "model.decoder_layers": (3, int, "decoder layer count"),
    "model.n_queries": (25, int, "object query count"),
    "model.decoder_heads": (4, int, "decoder attention heads"),
    "model.decoder_expansion": (4.0, float, "decoder feed-forward expansion"),
    "model.alpha": (0.45, float, "predicted-IoU exponent in score fusion"),
    "model.beta": (0.05, float, "predicted-centerness exponent in score fusion"),
    "model.centerness": (True, _bool, "enable reference points + centerness branch"),
    "model.memory_strides": (None, _opt_int_tuple,
                             "decoder memory strides, or none for defaults"),
    "model.multi_scale": (True, _bool, "multi-scale decoder memory"),
    "model.no_fusion": (False, _bool, "ablation: bypass cross-scale fusion"),
    "model.aware_loss": (True, _bool, "train the quality branches"),
    "model.token_labeling": (True, _bool, "train the dense token-labeling head"),
    "model.seed": (0, int, "parameter initialization seed"),
    "loss.cls": (2.0, float, "classification loss weight"),
    "loss.l1": (5.0, float, "box L1 loss weight"),
    "loss.giou": (2.0, float, "box GIoU loss weight"),
    "loss.aware": (1.0, float, "quality-branch loss weight"),
    "loss.token": (1.0, float, "token-labeling loss weight"),
    "train.lr": (2e-4, float, "base learning rate"),
    "train.beta1": (0.9, float, "AdamW beta1"),
    "train.beta2": (0.999, float, "AdamW beta2"),
    "train.weight_decay": (1e-4, float, "decoupled weight decay"),
    "train.epochs": (60, int, "training epochs"),
    "train.batch_size": (8, int, "images per optimizer step"),
    "train.seed": (0, int, "shuffle/augmentation seed"),
    "train.clip_norm": (0.1, float, "global gradient-norm clip"),
    "train.lr_drop_frac": (0.8, float, "schedule fraction where lr drops"),
    "train.lr_drop_factor": (0.1, float, "lr multiplier at the drop"),
    "train.flip_augment": (True, _bool, "random horizontal flip"),
}


def default_config() -> dict:
    return {k: v[0] for k, (v) in zip(SCHEMA.keys(), SCHEMA.values())}


def parse_config_text(text: str) -> dict:
    cfg = default_config()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {ln}: unknown config key {key!r}")
        _, parser, _ = SCHEMA[key]
        try:
            cfg[key] = parser(val)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"line {ln}: bad value for {key!r}: {e}") from None
    return cfg


def load_config(path=None) -> dict:
    if path is None:
        return default_config()
    with open(path) as fh:
        return parse_config_text(fh.read())


def describe_schema() -> str:
    lines = ["key = default  (description)", "-" * 60]
    for k, (d, _, help_) in SCHEMA.items():
        lines.append(f"{k} = {d}  ({help_})")
    return "\n".join(lines)


def build_detector_config(cfg: dict) -> DetectorConfig:
    try:
        pyramid = PyramidConfig(
            image_size=cfg["data.image_size"],
            channels=cfg["model.channels"],
            depths=cfg["model.depths"],
            heads=cfg["model.heads"],
            patch_strides=cfg["model.patch_strides"],
            expansion=cfg["model.expansion"],
            pool=cfg["model.pool"],
            fuse_width=cfg["model.fuse_width"],
            fuse_depth=cfg["model.fuse_depth"],
            fuse_start_lvl=cfg["model.fuse_start_lvl"],
            fuse_expansion=cfg["model.fuse_expansion"])
        decoder = DecoderConfig(
            layers=cfg["model.decoder_layers"],
            n_queries=cfg["model.n_queries"],
            width=cfg["model.fuse_width"],
            heads=cfg["model.decoder_heads"],
            expansion=cfg["model.decoder_expansion"],
            memory_strides=cfg["model.memory_strides"],
            alpha=cfg["model.alpha"],
            beta=cfg["model.beta"],
            centerness=cfg["model.centerness"],
            n_classes=2)
        weights = LossWeights(cls=cfg["loss.cls"], l1=cfg["loss.l1"],
                              giou=cfg["loss.giou"], aware=cfg["loss.aware"],
                              token=cfg["loss.token"])
        return DetectorConfig(pyramid=pyramid, decoder=decoder, weights=weights,
                              multi_scale=cfg["model.multi_scale"],
                              no_fusion=cfg["model.no_fusion"],
                              aware_loss=cfg["model.aware_loss"],
                              token_labeling=cfg["model.token_labeling"],
                              seed=cfg["model.seed"])
    except ValueError as e:
        raise ConfigError(str(e)) from None


def build_train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            lr=cfg["train.lr"],
            betas=(cfg["train.beta1"], cfg["train.beta2"]),
            weight_decay=cfg["train.weight_decay"],
            epochs=cfg["train.epochs"],
            batch_size=cfg["train.batch_size"],
            seed=cfg["train.seed"],
            clip_norm=cfg["train.clip_norm"],
            lr_drop_frac=cfg["train.lr_drop_frac"],
            lr_drop_factor=cfg["train.lr_drop_factor"],
            flip_augment=cfg["train.flip_augment"])
    except ValueError as e:
        raise ConfigError(str(e)) from None
