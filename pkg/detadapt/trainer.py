"""Training and evaluation pipelines for every experiment mode.

All randomness of a run flows from ``TrainConfig.seed`` through independent
generator streams (detector init, discriminator init, source sampling, target
sampling, dropout), so switching discriminators on or off never changes what
the source side of a run sees.
"""
from __future__ import annotations

import json
import logging
import math
import shutil
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from .detector import AnchorSet, BoxAnnotation, DetectorConfig, TinyRetinaNet, detection_loss, generate_anchors, predict
from .domainadapt import (
    DiscriminatorSet,
    DomainConfig,
    DomainLoss,
    check_batch_sizes,
    domain_loss,
    reported_total,
    total_loss,
)
from .errors import ConfigError, NumericalError
from .evalmap import Metrics, evaluate, write_metrics
from .tensorcore import SGD, backward, load_checkpoint, save_checkpoint
from .toydomains import (
    STATS_NAME,
    DatasetManifest,
    DomainStats,
    color_stat_transfer,
    load_image,
    load_stats,
    read_image_list,
    read_manifest,
)


logger = logging.getLogger("detadapt.trainer")

LOSS_COLUMNS = ["iteration", "l_class", "l_box", "l_d3", "l_d4", "l_d5", "eq1_total"]
DEFAULT_SUBSETS: tuple[tuple[int, ...], ...] = ((), (3,), (4,), (5,), (3, 4), (3, 4, 5))
TRANSLATIONS = ("real2syn", "syn2real")

Transform = Callable[[np.ndarray], np.ndarray]


class Mode(str, Enum):
    BASELINE = "baseline"
    FEATURE_ALIGN = "feature_align"
    TRANSLATE_ONLY = "translate_only"
    COMBINED_SYN2REAL = "combined_syn2real"
    COMBINED_REAL2SYN = "combined_real2syn"
    ORACLE = "oracle"

    @property
    def aligns_features(self) -> bool:
        return self in (Mode.FEATURE_ALIGN, Mode.COMBINED_SYN2REAL, Mode.COMBINED_REAL2SYN)


@dataclass(frozen=True)
class TrainConfig:
    mode: Mode = Mode.BASELINE
    lam: float = 0.5
    levels: tuple[int, ...] = (3, 4, 5)
    gamma_d: float = 2.0
    alpha_d: float = 0.5
    iterations: int = 3000
    batch_size: int = 8
    target_batch_size: int = 8
    lr: float = 0.001
    lr_decay: float = 0.1
    decay_at: int = 1500
    seed: int = 0
    translation: str = "real2syn"
    checkpoint_every: int = 500
    log_every: int = 50
    eval_batch_size: int = 16
    iou_threshold: float = 0.5
    select_best: bool = True
    source_train: str = ""
    target_train: str = ""
    source_test: str = ""
    target_test: str = ""
    source_stats: str = ""
    target_stats: str = ""
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "mode", Mode(self.mode))
        except ValueError as exc:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {[m.value for m in Mode]}") from exc
        if self.iterations < 1:
            raise ConfigError(f"iterations must be at least 1, got {self.iterations}")
        if not 0 <= self.decay_at <= self.iterations:
            raise ConfigError(f"decay_at must lie in [0, iterations], got {self.decay_at}")
        if self.batch_size < 1 or self.target_batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be at least 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.translation not in TRANSLATIONS:
            raise ConfigError(f"translation must be one of {TRANSLATIONS}, got {self.translation!r}")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be at least 1")
        domain = self.domain_config()
        size = self.detector.image_size
        batches = {"batch_size": self.batch_size}
        if self.adapts:
            batches["target_batch_size"] = self.target_batch_size
        last_side = size // self.detector.STRIDES[-1]
        for key, batch in batches.items():
            if batch * last_side * last_side < 2:
                raise ConfigError(
                    f"{key}={batch} leaves one value per channel in the last backbone stage at image_size={size}"
                )
        if self.adapts:
            sides = {level: size // stride for level, stride in zip(self.detector.LEVELS, self.detector.STRIDES)}
            check_batch_sizes(domain, sides, batches)

    def domain_config(self) -> DomainConfig:
        return DomainConfig(levels=tuple(self.levels), lam=self.lam, gamma_d=self.gamma_d, alpha_d=self.alpha_d)

    @property
    def adapts(self) -> bool:
        """True when discriminators are trained; an empty level set reduces to the baseline."""
        return self.mode.aligns_features and bool(self.levels)

    def learning_rate(self, iteration: int) -> float:
        return self.lr if iteration <= self.decay_at else self.lr * self.lr_decay


@dataclass(frozen=True)
class LossBreakdown:
    iteration: int
    l_class: float
    l_box: float
    l_d3: float
    l_d4: float
    l_d5: float
    eq1_total: float


@dataclass
class TrainResult:
    model: TinyRetinaNet
    discriminators: DiscriminatorSet | None
    losses: list[LossBreakdown]
    checkpoint: Path | None
    best_checkpoint: Path | None = None
    best_iteration: int | None = None
    best_map: float | None = None
    checkpoint_metrics: pd.DataFrame | None = None


@dataclass(frozen=True)
class RngStreams:
    detector_init: np.random.Generator
    discriminator_init: np.random.Generator
    source: np.random.Generator
    target: np.random.Generator
    dropout: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> RngStreams:
        children = np.random.SeedSequence(seed).spawn(5)
        return cls(*(np.random.default_rng(child) for child in children))


def stats_transform(stats: DomainStats) -> Transform:
    def _apply(image: np.ndarray) -> np.ndarray:
        return color_stat_transfer(image, stats)

    return _apply


class ImageStore:
    """Decoded images cached as uint8 HxWx3; ``batch`` returns float32 [B,3,S,S]."""

    def __init__(self, paths: Sequence[Path], transform: Transform | None = None) -> None:
        self.paths = list(paths)
        self.transform = transform
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.paths)

    def image(self, idx: int) -> np.ndarray:
        if idx not in self._cache:
            pixels = load_image(self.paths[idx])
            if self.transform is not None:
                pixels = self.transform(pixels)
            self._cache[idx] = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
        return self._cache[idx].astype(np.float32) / 255.0

    def batch(self, indices: Sequence[int]) -> np.ndarray:
        return np.stack([self.image(i).transpose(2, 0, 1) for i in indices]).astype(np.float32)


class _Sampler:
    """Epoch-wise shuffling without replacement; partial epochs wrap into the next one."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator) -> None:
        if size == 0:
            raise ConfigError("cannot sample batches from an empty dataset")
        self.size = size
        self.batch_size = batch_size
        self.rng = rng
        self._queue: list[int] = []

    def next_indices(self) -> list[int]:
        while len(self._queue) < self.batch_size:
            self._queue.extend(self.rng.permutation(self.size).tolist())
        indices, self._queue = self._queue[: self.batch_size], self._queue[self.batch_size :]
        return indices


class LabeledStream:
    def __init__(
        self,
        manifest: DatasetManifest,
        batch_size: int,
        rng: np.random.Generator,
        transform: Transform | None = None,
    ) -> None:
        self.manifest = manifest
        self.store = ImageStore(manifest.image_paths(), transform)
        self.sampler = _Sampler(len(manifest), batch_size, rng)

    def next(self) -> tuple[list[int], np.ndarray, list[list[BoxAnnotation]]]:
        indices = self.sampler.next_indices()
        annotations = [list(self.manifest.records[i].boxes) for i in indices]
        return indices, self.store.batch(indices), annotations


class UnlabeledStream:
    """Target-domain batches built from image paths only; annotations are never read."""

    def __init__(
        self,
        image_paths: Sequence[Path],
        batch_size: int,
        rng: np.random.Generator,
        transform: Transform | None = None,
    ) -> None:
        self.store = ImageStore(image_paths, transform)
        self.sampler = _Sampler(len(self.store), batch_size, rng)

    @classmethod
    def from_manifest(
        cls,
        manifest: DatasetManifest,
        batch_size: int,
        rng: np.random.Generator,
        transform: Transform | None = None,
    ) -> UnlabeledStream:
        return cls(manifest.image_paths(), batch_size, rng, transform)

    def next(self) -> tuple[list[int], np.ndarray]:
        indices = self.sampler.next_indices()
        return indices, self.store.batch(indices)


def combined_state(model: TinyRetinaNet, discriminators: DiscriminatorSet | None) -> dict[str, np.ndarray]:
    state = {f"detector.{name}": array for name, array in model.state_dict().items()}
    if discriminators is not None:
        state.update({f"discriminators.{name}": array for name, array in discriminators.state_dict().items()})
    return state


def detector_state(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Detector entries of a checkpoint with the prefix removed; discriminator entries are dropped."""
    out = {}
    for name, array in state.items():
        if name.startswith("detector."):
            out[name[len("detector.") :]] = array
        elif not name.startswith("discriminators."):
            out[name] = array
    return out


def load_detector(checkpoint: str | Path, config: DetectorConfig) -> TinyRetinaNet:
    model = TinyRetinaNet(config, np.random.default_rng(0))
    model.load_state_dict(detector_state(load_checkpoint(checkpoint)), strict=True)
    return model.eval()


def evaluate_model(
    model: TinyRetinaNet,
    manifest: DatasetManifest,
    transform: Transform | None = None,
    batch_size: int = 16,
    iou_threshold: float = 0.5,
    anchors: AnchorSet | None = None,
) -> Metrics:
    store = ImageStore(manifest.image_paths(), transform)
    anchors = anchors if anchors is not None else generate_anchors(model.config.image_size, model.config)
    predictions = []
    starts = range(0, len(store), batch_size)
    for start in tqdm(starts, desc="evaluate", leave=False, disable=len(starts) < 2):
        indices = list(range(start, min(start + batch_size, len(store))))
        predictions.extend(predict(model, store.batch(indices), anchors))
    return evaluate(predictions, manifest, iou_threshold)


def evaluate_checkpoint(
    checkpoint: str | Path,
    manifest: DatasetManifest,
    config: DetectorConfig,
    transform: Transform | None = None,
    batch_size: int = 16,
    iou_threshold: float = 0.5,
) -> Metrics:
    """Eval-mode metrics of a saved detector; a parameter-name mismatch raises CheckpointMismatchError."""
    model = load_detector(checkpoint, config)
    return evaluate_model(model, manifest, transform, batch_size, iou_threshold)


def _flush_losses(rows: list[LossBreakdown], path: Path, header: bool) -> None:
    if not rows:
        return
    frame = pd.DataFrame([asdict(r) for r in rows], columns=LOSS_COLUMNS)
    frame.to_csv(path, mode="w" if header else "a", header=header, index=False)


def train(
    config: TrainConfig,
    source_manifest: DatasetManifest,
    target_manifest: DatasetManifest | None = None,
    out_dir: str | Path | None = None,
    source_transform: Transform | None = None,
    target_transform: Transform | None = None,
    selection_manifest: DatasetManifest | None = None,
    selection_transform: Transform | None = None,
    progress: bool = False,
) -> TrainResult:
    """Run SGD over the mode's objective; writes the loss log and checkpoints when ``out_dir`` is given.

    ``target_manifest`` is only consulted for its image paths.
    """
    if config.adapts and target_manifest is None:
        raise ConfigError(f"mode {config.mode.value} needs a target manifest")

    streams = RngStreams.from_seed(config.seed)
    detector_config = config.detector
    model = TinyRetinaNet(detector_config, streams.detector_init)
    discriminators = None
    if config.adapts:
        discriminators = DiscriminatorSet(detector_config.c_channels, config.domain_config(), streams.discriminator_init)
    params = model.parameters() + (discriminators.parameters() if discriminators is not None else [])
    optimizer = SGD(params, lr=config.lr, momentum=0.9)
    anchors = generate_anchors(detector_config.image_size, detector_config)

    source = LabeledStream(source_manifest, config.batch_size, streams.source, source_transform)
    target = None
    if discriminators is not None:
        target = UnlabeledStream.from_manifest(target_manifest, config.target_batch_size, streams.target, target_transform)

    out = Path(out_dir) if out_dir is not None else None
    loss_log = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        loss_log = out / "loss_log.csv"
    pending: list[LossBreakdown] = []
    losses: list[LossBreakdown] = []
    header_written = False
    sweep_rows: list[dict] = []
    best: tuple[float, int] | None = None

    model.train()
    if discriminators is not None:
        discriminators.train()

    logger.info(
        "training %s for %s iterations (levels=%s, lambda=%s, seed=%s)",
        config.mode.value,
        config.iterations,
        ",".join(map(str, config.levels)) if config.adapts else "-",
        config.lam if config.adapts else 0,
        config.seed,
    )
    for iteration in tqdm(range(1, config.iterations + 1), disable=not progress, desc=config.mode.value):
        optimizer.lr = config.learning_rate(iteration)
        optimizer.zero_grad()

        source_idx, source_images, annotations = source.next()
        source_pyramid, head = model(source_images)
        det = detection_loss(head, anchors, annotations, detector_config)
        target_idx: list[int] = []
        if discriminators is not None:
            target_idx, target_images = target.next()
            with model.frozen_statistics():
                target_pyramid = model.backbone_forward(target_images)
            dom = domain_loss(discriminators, source_pyramid, target_pyramid, streams.dropout)
        else:
            dom = DomainLoss()

        lam = config.lam if discriminators is not None else 0.0
        d3, d4, d5 = dom.values()
        row = LossBreakdown(iteration, det.l_class.item(), det.l_box.item(), d3, d4, d5, reported_total(det, dom, lam))
        if not all(math.isfinite(v) for v in asdict(row).values()):
            dump = {
                "iteration": iteration,
                "seed": config.seed,
                "source_indices": source_idx,
                "target_indices": target_idx,
                "source_images": [source_manifest.records[i].image for i in source_idx],
                "losses": asdict(row),
            }
            if out is not None:
                _flush_losses(pending, loss_log, not header_written)
                (out / "nonfinite_dump.json").write_text(json.dumps(dump, indent=2), encoding="utf-8")
            raise NumericalError(f"non-finite loss at iteration {iteration}", dump)

        backward(total_loss(det, dom, lam))
        optimizer.step()

        losses.append(row)
        pending.append(row)
        if iteration % config.log_every == 0 or iteration == config.iterations:
            logger.info(
                "iter %s lr=%g l_class=%.4f l_box=%.4f l_d=(%.4f, %.4f, %.4f) total=%.4f",
                iteration, optimizer.lr, row.l_class, row.l_box, d3, d4, d5, row.eq1_total,
            )
            if loss_log is not None:
                _flush_losses(pending, loss_log, not header_written)
                header_written = True
            pending = []

        if out is not None and (iteration % config.checkpoint_every == 0 or iteration == config.iterations):
            state = combined_state(model, discriminators)
            path = save_checkpoint(state, out / f"iter_{iteration:06d}.ckpt")
            if selection_manifest is not None:
                model.eval()
                score = evaluate_model(
                    model, selection_manifest, selection_transform, config.eval_batch_size, config.iou_threshold, anchors
                ).map_score
                model.train()
                sweep_rows.append({"iteration": iteration, "map": score})
                logger.info("checkpoint %s: selection mAP %.4f", iteration, score)
                if best is None or score > best[0]:
                    best = (score, iteration)
                    shutil.copyfile(path, out / "best.ckpt")

    result = TrainResult(model, discriminators, losses, None)
    if out is not None:
        result.checkpoint = save_checkpoint(combined_state(model, discriminators), out / "final.ckpt")
        if sweep_rows:
            frame = pd.DataFrame(sweep_rows, columns=["iteration", "map"])
            frame.to_csv(out / "checkpoint_metrics.csv", index=False)
            result.checkpoint_metrics = frame
            result.best_checkpoint = out / "best.ckpt"
            result.best_map, result.best_iteration = best
    model.eval()
    return result


def adaptation_label(config: TrainConfig) -> str:
    mode = config.mode
    if mode is Mode.BASELINE or (mode is Mode.FEATURE_ALIGN and not config.levels):
        return "none"
    if mode is Mode.ORACLE:
        return "target labels"
    levels = "+".join(f"D{level}" for level in config.levels)
    if mode is Mode.FEATURE_ALIGN:
        return f"feature alignment ({levels})"
    if mode is Mode.TRANSLATE_ONLY:
        return f"image translation ({config.translation})"
    direction = "syn2real" if mode is Mode.COMBINED_SYN2REAL else "real2syn"
    return f"image translation ({direction}) + feature alignment ({levels})"


def _require(path: str, key: str) -> Path:
    if not path:
        raise ConfigError(f"config key '{key}' must name a manifest for this mode")
    return Path(path)


def _stats_for(stats_path: str, manifest_path: Path) -> DomainStats:
    return load_stats(Path(stats_path) if stats_path else manifest_path.parent / STATS_NAME)


def run_pipeline(config: TrainConfig, out_dir: str | Path, progress: bool = False) -> Metrics:
    """Execute one experiment mode end to end and return target-test metrics.

    Writes ``metrics.csv``/``metrics.json`` (final checkpoint on target test),
    ``run.json`` and, when configured, ``source_metrics.csv``.
    """
    out = Path(out_dir)
    mode = config.mode
    target_test_path = _require(config.target_test, "target_test")
    target_test = read_manifest(target_test_path, split="test")

    if mode is Mode.ORACLE:
        source_path = _require(config.target_train, "target_train")
    else:
        source_path = _require(config.source_train, "source_train")
    source_train = read_manifest(source_path, split="train")

    target_train = None
    if config.adapts:
        target_train = read_image_list(_require(config.target_train, "target_train"), split="train")

    source_transform = target_transform = test_transform = None
    translate_source = mode is Mode.COMBINED_SYN2REAL or (mode is Mode.TRANSLATE_ONLY and config.translation == "syn2real")
    translate_target = mode is Mode.COMBINED_REAL2SYN or (mode is Mode.TRANSLATE_ONLY and config.translation == "real2syn")
    if translate_source:
        reference = Path(config.target_train) if config.target_train else target_test_path
        stats = _stats_for(config.target_stats, reference)
        source_transform = stats_transform(stats)
        logger.info("translating source training images toward target statistics")
    if translate_target:
        stats = _stats_for(config.source_stats, source_path)
        target_transform = test_transform = stats_transform(stats)
        logger.info("translating target images toward source statistics")

    result = train(
        config,
        source_train,
        target_train,
        out,
        source_transform=source_transform,
        target_transform=target_transform,
        selection_manifest=target_test if config.select_best else None,
        selection_transform=test_transform,
        progress=progress,
    )
    metrics = evaluate_model(
        result.model, target_test, test_transform, config.eval_batch_size, config.iou_threshold
    )
    write_metrics(metrics, out / "metrics.csv")

    source_map = None
    if config.source_test:
        source_metrics = evaluate_model(
            result.model, read_manifest(config.source_test, split="test"), None,
            config.eval_batch_size, config.iou_threshold,
        )
        write_metrics(source_metrics, out / "source_metrics.csv")
        source_map = source_metrics.map_score

    summary = {
        "mode": mode.value,
        "adaptation": adaptation_label(config),
        "seed": config.seed,
        "lambda": config.lam if config.adapts else 0.0,
        "levels": list(config.levels) if config.adapts else [],
        "iterations": config.iterations,
        "map": metrics.map_score,
        "source_map": source_map,
        "best_iteration": result.best_iteration,
        "best_map": result.best_map,
    }
    (out / "run.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    logger.info("%s: target mAP %.4f", mode.value, metrics.map_score)
    return metrics


def subset_label(levels: Sequence[int]) -> str:
    return "+".join(str(level) for level in sorted(levels)) or "none"


def parse_subset(text: str) -> tuple[int, ...]:
    """``"none"`` or ``"3+4"`` style labels back to level tuples."""
    text = text.strip()
    if text in ("", "none", "{}"):
        return ()
    try:
        return tuple(sorted({int(part) for part in text.replace(",", "+").split("+")}))
    except ValueError as exc:
        raise ConfigError(f"cannot parse discriminator subset {text!r}") from exc


def _ablation_job(config: TrainConfig, out_dir: Path) -> float:
    return run_pipeline(config, out_dir).map_score


def ablate(
    config: TrainConfig,
    subsets: Sequence[Sequence[int]] = DEFAULT_SUBSETS,
    out_dir: str | Path = "ablation",
    seeds: Sequence[int] | None = None,
    workers: int = 1,
) -> pd.DataFrame:
    """One run per (subset, seed) on shared data; the ``map`` column is the mean over seeds."""
    if not subsets:
        raise ConfigError("ablation needs at least one discriminator subset")
    if not config.mode.aligns_features:
        raise ConfigError(f"ablation needs a feature-alignment mode, got {config.mode.value}")
    out = Path(out_dir)
    seeds = list(seeds) if seeds else [config.seed]

    jobs = []
    for subset in subsets:
        levels = tuple(sorted(set(subset)))
        for seed in seeds:
            run_config = replace(config, levels=levels, seed=seed)
            jobs.append((subset_label(levels), run_config, out / f"subset_{subset_label(levels)}" / f"seed_{seed}"))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_ablation_job, [j[1] for j in jobs], [j[2] for j in jobs]))
    else:
        scores = [_ablation_job(cfg, path) for _, cfg, path in jobs]

    per_run = pd.DataFrame({"subset": [j[0] for j in jobs], "map": scores})
    order = list(dict.fromkeys(per_run["subset"]))
    table = per_run.groupby("subset", sort=False)["map"].mean().reindex(order).reset_index()
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "ablation.csv", index=False)
    return table
