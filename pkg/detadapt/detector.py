"""Miniature single-stage focal-loss detector.

Four stride-2 conv stages produce C3/C4/C5 at strides 4/8/16, 1x1 laterals with
nearest top-down addition give P3/P4/P5, and one classification subnet plus
one regression subnet are shared across the three pyramid levels.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import ClassVar

import numpy as np

from . import boxes as box_ops
from .errors import ConfigError, ShapeError
from .tensorcore import (
    BatchNorm2d,
    Conv2d,
    Module,
    Parameter,
    Tensor,
    concat,
    relu,
    upsample_nearest_2x,
)


logger = logging.getLogger("detadapt.detector")

BACKGROUND = -1
IGNORE = -2


@dataclass(frozen=True)
class DetectorConfig:
    LEVELS: ClassVar[tuple[int, int, int]] = (3, 4, 5)
    STRIDES: ClassVar[tuple[int, int, int]] = (4, 8, 16)

    image_size: int = 128
    num_classes: int = 8
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    pyramid_channels: int = 64
    head_convs: int = 2
    anchor_sizes: tuple[float, float, float] = (16.0, 32.0, 64.0)
    anchor_scales: tuple[float, ...] = (1.0, 2 ** (1 / 3), 2 ** (2 / 3))
    pos_threshold: float = 0.5
    neg_threshold: float = 0.4
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    box_beta: float = 1 / 9
    prior_prob: float = 0.01
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    pre_nms_top_k: int = 1000
    cls_normalizer: str = "positives"

    def __post_init__(self) -> None:
        if self.image_size <= 0 or self.image_size % 16:
            raise ConfigError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be at least 1")
        if len(self.stage_channels) != 4:
            raise ConfigError("stage_channels needs four entries")
        if len(self.anchor_sizes) != 3 or not self.anchor_scales:
            raise ConfigError("anchor_sizes needs three entries and anchor_scales at least one")
        if not self.pos_threshold > self.neg_threshold:
            raise ConfigError("pos_threshold must exceed neg_threshold")
        if not 0 < self.prior_prob < 1:
            raise ConfigError("prior_prob must be in (0, 1)")
        if self.cls_normalizer not in ("positives", "anchors"):
            raise ConfigError(f"cls_normalizer must be 'positives' or 'anchors', got {self.cls_normalizer!r}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales)

    @property
    def c_channels(self) -> tuple[int, int, int]:
        return tuple(self.stage_channels[1:])


@dataclass(frozen=True)
class BoxAnnotation:
    class_id: int
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class Anchor:
    level: int
    cx: float
    cy: float
    width: float
    height: float


@dataclass(frozen=True)
class AnchorSet:
    """Anchors in head-flattening order: level, row, column, anchor index."""

    boxes: np.ndarray
    levels: np.ndarray

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, idx: int) -> Anchor:
        x1, y1, x2, y2 = self.boxes[idx]
        return Anchor(int(self.levels[idx]), (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def count(self, level: int) -> int:
        return int((self.levels == level).sum())


@dataclass
class FeaturePyramid:
    c3: Tensor
    c4: Tensor
    c5: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor

    def c_level(self, level: int) -> Tensor:
        return {3: self.c3, 4: self.c4, 5: self.c5}[level]

    def p_levels(self) -> list[Tensor]:
        return [self.p3, self.p4, self.p5]


@dataclass
class HeadOutput:
    class_logits: list[Tensor]
    box_deltas: list[Tensor]

    def flatten(self, num_classes: int) -> tuple[Tensor, Tensor]:
        """Concatenate levels into ``[B, N, K]`` logits and ``[B, N, 4]`` deltas."""
        logits, deltas = [], []
        for cls_map, box_map in zip(self.class_logits, self.box_deltas):
            batch = cls_map.shape[0]
            logits.append(cls_map.transpose(0, 2, 3, 1).reshape(batch, -1, num_classes))
            deltas.append(box_map.transpose(0, 2, 3, 1).reshape(batch, -1, 4))
        return concat(logits, axis=1), concat(deltas, axis=1)


@dataclass
class DetLoss:
    l_class: Tensor
    l_box: Tensor


@dataclass
class AnchorTargets:
    labels: np.ndarray
    deltas: np.ndarray
    matched_gt: np.ndarray = field(repr=False)

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0


class Stage(Module):
    """Two 3x3 conv + batch norm + ReLU layers, the first one striding by 2."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=2, padding=1)
        self.bn1 = BatchNorm2d(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=1, padding=1)
        self.bn2 = BatchNorm2d(out_channels)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))


class Backbone(Module):
    def __init__(self, channels: tuple[int, int, int, int], rng: np.random.Generator) -> None:
        super().__init__()
        self.stage1 = Stage(3, channels[0], rng)
        self.stage2 = Stage(channels[0], channels[1], rng)
        self.stage3 = Stage(channels[1], channels[2], rng)
        self.stage4 = Stage(channels[2], channels[3], rng)

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        c3 = self.stage2(self.stage1(images))
        c4 = self.stage3(c3)
        c5 = self.stage4(c4)
        return c3, c4, c5


class PyramidNeck(Module):
    def __init__(self, c_channels: tuple[int, int, int], out_channels: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.lateral3 = Conv2d(c_channels[0], out_channels, 1, rng)
        self.lateral4 = Conv2d(c_channels[1], out_channels, 1, rng)
        self.lateral5 = Conv2d(c_channels[2], out_channels, 1, rng)

    def forward(self, c3: Tensor, c4: Tensor, c5: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        p5 = self.lateral5(c5)
        p4 = self.lateral4(c4) + upsample_nearest_2x(p5)
        p3 = self.lateral3(c3) + upsample_nearest_2x(p4)
        return p3, p4, p5


class RetinaHead(Module):
    def __init__(self, config: DetectorConfig, rng: np.random.Generator) -> None:
        super().__init__()
        width = config.pyramid_channels
        anchors = config.anchors_per_cell
        self.cls_convs = [Conv2d(width, width, 3, rng, padding=1) for _ in range(config.head_convs)]
        self.cls_out = Conv2d(width, config.num_classes * anchors, 3, rng, padding=1)
        self.box_convs = [Conv2d(width, width, 3, rng, padding=1) for _ in range(config.head_convs)]
        self.box_out = Conv2d(width, 4 * anchors, 3, rng, padding=1)
        prior = config.prior_prob
        self.cls_out.bias = Parameter(np.full(config.num_classes * anchors, -math.log((1 - prior) / prior)))

    def _subnet(self, convs: list[Conv2d], out: Conv2d, x: Tensor) -> Tensor:
        for conv in convs:
            x = relu(conv(x))
        return out(x)

    def forward(self, levels: list[Tensor]) -> HeadOutput:
        return HeadOutput(
            class_logits=[self._subnet(self.cls_convs, self.cls_out, p) for p in levels],
            box_deltas=[self._subnet(self.box_convs, self.box_out, p) for p in levels],
        )


class TinyRetinaNet(Module):
    def __init__(self, config: DetectorConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.backbone = Backbone(config.stage_channels, rng)
        self.neck = PyramidNeck(config.c_channels, config.pyramid_channels, rng)
        self.head = RetinaHead(config, rng)

    def backbone_forward(self, images) -> FeaturePyramid:
        images = images if isinstance(images, Tensor) else Tensor(images)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images shaped [B,3,S,S], got {images.shape}")
        size = images.shape[2]
        if images.shape[3] != size or size % 16:
            raise ShapeError(f"image side must be square and divisible by 16, got {images.shape[2:]}")
        c3, c4, c5 = self.backbone(images)
        p3, p4, p5 = self.neck(c3, c4, c5)
        return FeaturePyramid(c3, c4, c5, p3, p4, p5)

    def head_forward(self, pyramid: FeaturePyramid) -> HeadOutput:
        return self.head(pyramid.p_levels())

    def forward(self, images) -> tuple[FeaturePyramid, HeadOutput]:
        pyramid = self.backbone_forward(images)
        return pyramid, self.head_forward(pyramid)


def generate_anchors(image_size: int, config: DetectorConfig) -> AnchorSet:
    if image_size % 16:
        raise ShapeError(f"image side must be divisible by 16, got {image_size}")
    all_boxes, all_levels = [], []
    sides = np.asarray(config.anchor_scales, dtype=np.float64)
    for level, stride, base in zip(config.LEVELS, config.STRIDES, config.anchor_sizes):
        cells = image_size // stride
        centers = (np.arange(cells) + 0.5) * stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        half = base * sides / 2
        cx = cx[..., None]
        cy = cy[..., None]
        level_boxes = np.stack(np.broadcast_arrays(cx - half, cy - half, cx + half, cy + half), axis=-1)
        all_boxes.append(level_boxes.reshape(-1, 4))
        all_levels.append(np.full(cells * cells * len(sides), level, dtype=np.int64))
    return AnchorSet(np.concatenate(all_boxes), np.concatenate(all_levels))


def match_anchors(
    anchors: AnchorSet | np.ndarray,
    gts: list[BoxAnnotation],
    pos_threshold: float = 0.5,
    neg_threshold: float = 0.4,
) -> AnchorTargets:
    """Assign each anchor a class, background or ignore.

    Max-IoU ties go to the lowest GT index; each GT also claims its single
    best-overlapping anchor. A contested anchor goes to the claimant that
    overlaps it most, again with the lowest index on exact ties.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    if len(boxes) == 0:
        raise ShapeError("cannot match against an empty anchor set")
    if not pos_threshold > neg_threshold:
        raise ValueError("pos_threshold must exceed neg_threshold")

    count = len(boxes)
    labels = np.full(count, BACKGROUND, dtype=np.int64)
    matched = np.full(count, -1, dtype=np.int64)
    deltas = np.zeros((count, 4), dtype=np.float64)
    if not gts:
        return AnchorTargets(labels, deltas, matched)

    gt_boxes = np.array([g.box for g in gts], dtype=np.float64)
    gt_classes = np.array([g.class_id for g in gts], dtype=np.int64)
    overlaps = box_ops.pairwise_iou(boxes, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(count), best_gt]

    positive = best_iou >= pos_threshold
    matched[positive] = best_gt[positive]
    labels[(best_iou >= neg_threshold) & ~positive] = IGNORE

    claimant = np.full(count, -1, dtype=np.int64)
    claim_iou = np.zeros(count, dtype=np.float64)
    for j in range(len(gts)):
        column = overlaps[:, j]
        best_anchor = int(column.argmax())
        if column[best_anchor] > claim_iou[best_anchor]:
            claimant[best_anchor] = j
            claim_iou[best_anchor] = column[best_anchor]
    claimed = claimant >= 0
    matched[claimed] = claimant[claimed]

    has_gt = matched >= 0
    labels[has_gt] = gt_classes[matched[has_gt]]
    deltas[has_gt] = box_ops.encode(boxes[has_gt], gt_boxes[matched[has_gt]])
    return AnchorTargets(labels, deltas, matched)


def focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    alpha: float | None = 0.25,
    gamma: float = 2.0,
    valid: np.ndarray | None = None,
    normalizer: float | None = None,
) -> Tensor:
    """Sigmoid focal loss over ``logits[..., K]`` with 0/1 ``targets`` of the same shape.

    ``valid`` masks anchors (all leading dims); the sum over kept class slots is
    divided by ``normalizer``, by default the number of kept anchors. ``alpha``
    of None weights both labels by 1.
    """
    z = logits.data.astype(np.float64)
    t = np.broadcast_to(np.asarray(targets, dtype=np.float64), z.shape)
    if valid is None:
        weight = np.ones(z.shape[:-1], dtype=np.float64)
    else:
        weight = np.asarray(valid, dtype=np.float64)
    if normalizer is None:
        normalizer = weight.sum()
    normalizer = max(float(normalizer), 1.0)
    weight = weight[..., None] / normalizer

    p = np.clip(0.5 * (1.0 + np.tanh(0.5 * z)), 1e-7, 1 - 1e-7)
    positive = t > 0.5
    pt = np.where(positive, p, 1.0 - p)
    at = 1.0 if alpha is None else np.where(positive, alpha, 1.0 - alpha)
    modulator = (1.0 - pt) ** gamma
    log_pt = np.log(pt)
    total = float((-at * modulator * log_pt * weight).sum())

    sign = np.where(positive, 1.0, -1.0)
    local_grad = at * sign * modulator * (gamma * pt * log_pt - (1.0 - pt)) * weight

    def _backward(g: np.ndarray) -> None:
        logits._accumulate((g * local_grad).astype(logits.dtype))

    return Tensor.from_op(np.asarray(total, dtype=logits.dtype), (logits,), _backward)


def box_loss(pred: Tensor, target: np.ndarray, positive: np.ndarray, beta: float = 1 / 9) -> Tensor:
    """Smooth-L1 summed over the four coordinates, averaged over positive anchors."""
    mask = np.asarray(positive, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        return Tensor(0.0, dtype=pred.dtype)
    diff = pred.data.astype(np.float64) - np.asarray(target, dtype=np.float64)
    absdiff = np.abs(diff)
    if beta > 0:
        per = np.where(absdiff < beta, 0.5 * diff**2 / beta, absdiff - 0.5 * beta)
        slope = np.where(absdiff < beta, diff / beta, np.sign(diff))
    else:
        per, slope = absdiff, np.sign(diff)
    keep = mask[..., None] / count
    total = float((per * keep).sum())
    local_grad = slope * keep

    def _backward(g: np.ndarray) -> None:
        pred._accumulate((g * local_grad).astype(pred.dtype))

    return Tensor.from_op(np.asarray(total, dtype=pred.dtype), (pred,), _backward)


def detection_loss(
    head: HeadOutput,
    anchors: AnchorSet,
    gts_per_image: list[list[BoxAnnotation]],
    config: DetectorConfig,
) -> DetLoss:
    logits, deltas = head.flatten(config.num_classes)
    batch, count, classes = logits.shape
    if count != len(anchors):
        raise ShapeError(f"head produced {count} anchors per image, anchor set has {len(anchors)}")
    if len(gts_per_image) != batch:
        raise ShapeError(f"{len(gts_per_image)} annotation lists for a batch of {batch}")

    labels = np.empty((batch, count), dtype=np.int64)
    box_targets = np.zeros((batch, count, 4), dtype=np.float64)
    for b, gts in enumerate(gts_per_image):
        targets = match_anchors(anchors, gts, config.pos_threshold, config.neg_threshold)
        labels[b] = targets.labels
        box_targets[b] = targets.deltas

    positive = labels >= 0
    onehot = np.zeros((batch, count, classes), dtype=np.float64)
    b_idx, a_idx = np.nonzero(positive)
    onehot[b_idx, a_idx, labels[positive]] = 1.0
    normalizer = max(int(positive.sum()), 1) if config.cls_normalizer == "positives" else None

    l_class = focal_loss(
        logits, onehot, config.focal_alpha, config.focal_gamma, valid=labels != IGNORE, normalizer=normalizer
    )
    l_box = box_loss(deltas, box_targets, positive, config.box_beta)
    return DetLoss(l_class, l_box)


def decode(
    class_logits: np.ndarray,
    box_deltas: np.ndarray,
    anchors: AnchorSet | np.ndarray,
    image_size: int,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_detections: int = 100,
    pre_nms_top_k: int = 1000,
) -> list[Detection]:
    """Turn one image's flattened ``[N, K]`` logits and ``[N, 4]`` deltas into detections."""
    anchor_boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, dtype=np.float64)
    logits = np.asarray(class_logits, dtype=np.float64)
    classes = logits.shape[1]
    scores = (0.5 * (1.0 + np.tanh(0.5 * logits))).reshape(-1)

    candidates = np.flatnonzero(scores > score_threshold)
    order = np.argsort(-scores[candidates], kind="stable")[:pre_nms_top_k]
    candidates = candidates[order]
    anchor_idx = candidates // classes
    class_idx = candidates % classes
    cand_scores = scores[candidates]
    cand_boxes = box_ops.clip(
        box_ops.decode(anchor_boxes[anchor_idx], np.asarray(box_deltas)[anchor_idx]), image_size, image_size
    )
    usable = (cand_boxes[:, 2] > cand_boxes[:, 0]) & (cand_boxes[:, 3] > cand_boxes[:, 1])

    kept: list[int] = []
    for cls in np.unique(class_idx[usable]):
        members = np.flatnonzero(usable & (class_idx == cls))
        kept.extend(members[box_ops.nms(cand_boxes[members], cand_scores[members], nms_iou)].tolist())
    kept.sort()

    return [
        Detection(int(class_idx[i]), float(cand_scores[i]), tuple(float(v) for v in cand_boxes[i]))
        for i in kept[:max_detections]
    ]


def predict(model: TinyRetinaNet, images: np.ndarray, anchors: AnchorSet | None = None) -> list[list[Detection]]:
    """Eval-mode forward and decode for a batch of ``[B,3,S,S]`` images."""
    config = model.config
    size = images.shape[2]
    anchors = anchors if anchors is not None else generate_anchors(size, config)
    was_training = model.training
    model.eval()
    try:
        _, head = model(images)
        logits, deltas = head.flatten(config.num_classes)
    finally:
        model.train(was_training)
    return [
        decode(
            logits.data[b],
            deltas.data[b],
            anchors,
            size,
            config.score_threshold,
            config.nms_iou,
            config.max_detections,
            config.pre_nms_top_k,
        )
        for b in range(images.shape[0])
    ]
