"""Per-class average precision and mAP at a fixed IoU threshold.

Detections are matched greedily in descending score order (ties keep input
order) against the highest-IoU unmatched ground truth of the same image; AP is
the area under the all-point interpolated precision envelope. Classes without
ground truth are left out of the mean.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .boxes import iou, pairwise_iou
from .detector import Detection
from .errors import DataError
from .toydomains import DatasetManifest


logger = logging.getLogger("detadapt.evalmap")

__all__ = [
    "GroundTruth",
    "Metrics",
    "ScoredBox",
    "average_precision",
    "evaluate",
    "iou",
    "read_metrics",
    "write_metrics",
]


@dataclass(frozen=True)
class ScoredBox:
    image: int
    score: float
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class GroundTruth:
    image: int
    box: tuple[float, float, float, float]


@dataclass
class Metrics:
    per_class_ap: dict[int, float] = field(default_factory=dict)
    map_score: float = 0.0
    iou_threshold: float = 0.5

    def to_frame(self) -> pd.DataFrame:
        rows = [{"class_id": str(c), "ap": ap} for c, ap in sorted(self.per_class_ap.items())]
        rows.append({"class_id": "mAP", "ap": self.map_score})
        return pd.DataFrame(rows, columns=["class_id", "ap"])

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "map": self.map_score,
            "per_class_ap": {str(c): ap for c, ap in sorted(self.per_class_ap.items())},
        }


def average_precision(
    detections: Sequence[ScoredBox],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
) -> float | None:
    """AP of one class; ``None`` when the class has no ground truth."""
    if not gts:
        return None
    if not detections:
        return 0.0

    grouped: dict[int, list] = defaultdict(list)
    for g in gts:
        grouped[g.image].append(g.box)
    gt_by_image = {image: np.array(b, dtype=np.float64) for image, b in grouped.items()}
    matched = {image: np.zeros(len(boxes), dtype=bool) for image, boxes in gt_by_image.items()}

    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(detections))
    for rank, det_idx in enumerate(order):
        det = detections[det_idx]
        candidates = gt_by_image.get(det.image)
        if candidates is None or len(candidates) == 0:
            continue
        overlaps = pairwise_iou(np.asarray(det.box, dtype=np.float64), candidates)[0]
        overlaps[matched[det.image]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            matched[det.image][best] = True
            tp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / len(gts)
    precision = cum_tp / (cum_tp + cum_fp)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate(
    predictions: Sequence[Sequence[Detection]],
    manifest: DatasetManifest,
    iou_threshold: float = 0.5,
) -> Metrics:
    """Pool detections per class over the manifest's images and compute AP/mAP."""
    if len(predictions) != len(manifest):
        raise DataError(f"{len(predictions)} prediction lists for a manifest of {len(manifest)} images")

    dets: dict[int, list[ScoredBox]] = defaultdict(list)
    truths: dict[int, list[GroundTruth]] = defaultdict(list)
    for image, (record, found) in enumerate(zip(manifest.records, predictions)):
        for gt in record.boxes:
            truths[gt.class_id].append(GroundTruth(image, gt.box))
        for det in found:
            dets[det.class_id].append(ScoredBox(image, det.score, det.box))

    per_class = {}
    for class_id in sorted(truths):
        ap = average_precision(dets.get(class_id, []), truths[class_id], iou_threshold)
        if ap is not None:
            per_class[class_id] = ap
    if not per_class:
        logger.warning("manifest has no ground-truth boxes; mAP reported as 0")
        return Metrics({}, 0.0, iou_threshold)
    return Metrics(per_class, float(np.mean(list(per_class.values()))), iou_threshold)


def write_metrics(metrics: Metrics, csv_path: str | Path, json_path: str | Path | None = None) -> Path:
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    metrics.to_frame().to_csv(csv_path, index=False)
    json_path = Path(json_path) if json_path is not None else csv_path.with_suffix(".json")
    json_path.write_text(json.dumps(metrics.to_dict(), indent=2), encoding="utf-8")
    return csv_path


def read_metrics(csv_path: str | Path) -> Metrics:
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise DataError(f"metrics file not found: {csv_path}")
    frame = pd.read_csv(csv_path, dtype={"class_id": str})
    if list(frame.columns) != ["class_id", "ap"] or "mAP" not in set(frame["class_id"]):
        raise DataError(f"{csv_path} is not a metrics table")
    per_class = {int(row.class_id): float(row.ap) for row in frame.itertuples() if row.class_id != "mAP"}
    map_score = float(frame.loc[frame["class_id"] == "mAP", "ap"].iloc[0])
    iou_threshold = 0.5
    json_path = csv_path.with_suffix(".json")
    if json_path.exists():
        iou_threshold = float(json.loads(json_path.read_text(encoding="utf-8")).get("iou_threshold", 0.5))
    return Metrics(per_class, map_score, iou_threshold)
