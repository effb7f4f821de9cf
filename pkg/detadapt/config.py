"""Flat ``key=value`` run configuration.

Every key has a default and a one-line description in ``DEFAULTS``. Values are
coerced by the type of their default; command-line flags override file values.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .detector import DetectorConfig
from .errors import ConfigError
from .toydomains import CorruptionProfile, SceneSpec
from .trainer import DEFAULT_SUBSETS, TrainConfig, parse_subset, subset_label


logger = logging.getLogger("detadapt.config")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

DEFAULTS: dict[str, tuple[Any, str]] = {
    # shared
    "seed": (0, "seed for scene layout, initialization and sampling"),
    "image_size": (128, "square image side in pixels (multiple of 16)"),
    "num_classes": (8, "number of glyph classes"),
    # scenes
    "source_train_count": (2000, "images in the labeled source training split"),
    "source_test_count": (300, "images in the source test split"),
    "target_train_count": (500, "images in the unlabeled target training split"),
    "target_test_count": (300, "images in the target test split"),
    "min_objects": (1, "fewest objects per scene"),
    "max_objects": (4, "most objects per scene"),
    "object_size_min": (0.125, "smallest object side as a fraction of the image"),
    "object_size_max": (0.3125, "largest object side as a fraction of the image"),
    "gain_min": (0.6, "lower bound of the target per-channel gain"),
    "gain_max": (0.9, "upper bound of the target per-channel gain"),
    "bias_min": (-0.05, "lower bound of the target per-channel bias"),
    "bias_max": (0.0, "upper bound of the target per-channel bias"),
    "noise_sigma": (0.05, "std of target Gaussian pixel noise"),
    "blur_radius": (1, "target box-blur radius in pixels"),
    "clutter_density": (3, "distractor rectangles per target scene"),
    # detector
    "stage_channels": ((16, 32, 64, 128), "output channels of the four backbone stages"),
    "pyramid_channels": (64, "channels of P3-P5 and of the head convs"),
    "head_convs": (2, "3x3 convs per head subnet before the output conv"),
    "anchor_sizes": ((16.0, 32.0, 64.0), "base anchor side on P3, P4, P5"),
    "pos_threshold": (0.5, "anchor IoU for a positive match"),
    "neg_threshold": (0.4, "anchor IoU below which an anchor is background"),
    "focal_alpha": (0.25, "focal loss alpha for detection"),
    "focal_gamma": (2.0, "focal loss gamma for detection"),
    "box_beta": (1 / 9, "smooth-L1 transition point"),
    "prior_prob": (0.01, "initial foreground probability of the class head"),
    "score_threshold": (0.05, "minimum detection score kept at decode"),
    "nms_iou": (0.5, "per-class NMS overlap threshold"),
    "max_detections": (100, "detections kept per image"),
    "pre_nms_top_k": (1000, "candidates kept before NMS"),
    "cls_normalizer": (
        "positives",
        "divisor of the summed class loss: positives (matched anchors) or anchors (every non-ignored anchor)",
    ),
    # training
    "mode": ("baseline", "baseline, feature_align, translate_only, combined_syn2real, combined_real2syn or oracle"),
    "lambda": (0.5, "gradient reversal weight"),
    "levels": ((3, 4, 5), "enabled discriminator levels"),
    "gamma_d": (2.0, "focal gamma of the discriminator loss"),
    "alpha_d": (0.5, "target share of the discriminator loss weight"),
    "iterations": (3000, "SGD iterations"),
    "batch_size": (8, "labeled source images per iteration"),
    "target_batch_size": (8, "unlabeled target images per iteration"),
    "lr": (0.001, "initial learning rate"),
    "lr_decay": (0.1, "learning rate factor after decay_at"),
    "decay_at": (1500, "iteration after which the learning rate decays"),
    "translation": ("real2syn", "translate_only direction: real2syn or syn2real"),
    "checkpoint_every": (500, "iterations between periodic checkpoints"),
    "log_every": (50, "iterations between loss log lines"),
    "eval_batch_size": (16, "images per inference batch"),
    "iou_threshold": (0.5, "IoU for a true positive in evaluation"),
    "select_best": (True, "evaluate periodic checkpoints on target test and keep best.ckpt"),
    "source_train": ("", "source training manifest"),
    "target_train": ("", "target training manifest (images only, except in oracle mode)"),
    "source_test": ("", "optional source test manifest for the same-domain report"),
    "target_test": ("", "target test manifest"),
    "source_stats": ("", "source stats.json; defaults to the file next to source_train"),
    "target_stats": ("", "target stats.json; defaults to the file next to target_train"),
    # ablation
    "ablation_subsets": (
        ";".join(subset_label(s) for s in DEFAULT_SUBSETS),
        "semicolon-separated discriminator subsets such as none;3;3+4",
    ),
    "ablation_seeds": ((0,), "seeds averaged per ablation row"),
    "workers": (1, "parallel processes for data generation and ablation"),
}


def coerce(key: str, raw: Any) -> Any:
    """Convert ``raw`` to the type of ``key``'s default."""
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key '{key}'")
    default = DEFAULTS[key][0]
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in _TRUE:
                return True
            if lowered in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            item_type = type(default[0]) if default else str
            return tuple(item_type(part) for part in text.replace(" ", "").split(",") if part)
    except ValueError as exc:
        raise ConfigError(f"invalid value {raw!r} for '{key}' ({type(default).__name__} expected)") from exc
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{line_no}: expected key=value, got {stripped!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{line_no}: unknown config key '{key}'")
        try:
            values[key] = coerce(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{line_no}: {exc}") from exc
    return values


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v for k, (v, _) in DEFAULTS.items()})

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def with_overrides(self, overrides: Mapping[str, Any]) -> RunConfig:
        merged = dict(self.values)
        for key, raw in overrides.items():
            if raw is None:
                continue
            merged[key] = coerce(key, raw)
        return RunConfig(merged)

    def scene_spec(self, domain: str, split: str = "train") -> SceneSpec:
        v = self.values
        profile = CorruptionProfile(
            gain_range=(v["gain_min"], v["gain_max"]),
            bias_range=(v["bias_min"], v["bias_max"]),
            noise_sigma=v["noise_sigma"],
            blur_radius=v["blur_radius"],
            clutter_density=v["clutter_density"],
        )
        return SceneSpec(
            seed=v["seed"],
            domain=domain,
            split=split,
            image_size=v["image_size"],
            num_classes=v["num_classes"],
            min_objects=v["min_objects"],
            max_objects=v["max_objects"],
            object_size=(v["object_size_min"], v["object_size_max"]),
            profile=profile,
        )

    def split_count(self, domain: str, split: str) -> int:
        return self.values[f"{domain}_{split}_count"]

    def detector_config(self) -> DetectorConfig:
        v = self.values
        return DetectorConfig(
            image_size=v["image_size"],
            num_classes=v["num_classes"],
            stage_channels=v["stage_channels"],
            pyramid_channels=v["pyramid_channels"],
            head_convs=v["head_convs"],
            anchor_sizes=v["anchor_sizes"],
            pos_threshold=v["pos_threshold"],
            neg_threshold=v["neg_threshold"],
            focal_alpha=v["focal_alpha"],
            focal_gamma=v["focal_gamma"],
            box_beta=v["box_beta"],
            prior_prob=v["prior_prob"],
            score_threshold=v["score_threshold"],
            nms_iou=v["nms_iou"],
            max_detections=v["max_detections"],
            pre_nms_top_k=v["pre_nms_top_k"],
            cls_normalizer=v["cls_normalizer"],
        )

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            mode=v["mode"],
            lam=v["lambda"],
            levels=v["levels"],
            gamma_d=v["gamma_d"],
            alpha_d=v["alpha_d"],
            iterations=v["iterations"],
            batch_size=v["batch_size"],
            target_batch_size=v["target_batch_size"],
            lr=v["lr"],
            lr_decay=v["lr_decay"],
            decay_at=v["decay_at"],
            seed=v["seed"],
            translation=v["translation"],
            checkpoint_every=v["checkpoint_every"],
            log_every=v["log_every"],
            eval_batch_size=v["eval_batch_size"],
            iou_threshold=v["iou_threshold"],
            select_best=v["select_best"],
            source_train=v["source_train"],
            target_train=v["target_train"],
            source_test=v["source_test"],
            target_test=v["target_test"],
            source_stats=v["source_stats"],
            target_stats=v["target_stats"],
            detector=self.detector_config(),
        )

    def ablation_subsets(self) -> list[tuple[int, ...]]:
        return [parse_subset(part) for part in self.values["ablation_subsets"].split(";")]

    def to_text(self) -> str:
        return "".join(f"{key}={format_value(self.values[key])}\n" for key in DEFAULTS)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides``."""
    config = RunConfig()
    if path is not None:
        path = Path(path)
        config = config.with_overrides(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
        logger.debug("loaded config from %s", path)
    if overrides:
        config = config.with_overrides(overrides)
    return config


def describe_defaults() -> str:
    """One ``key=default  # help`` line per key, usable as a starting config file."""
    return "".join(f"{key}={format_value(default)}  # {text}\n" for key, (default, text) in DEFAULTS.items())
