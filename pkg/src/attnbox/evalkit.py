"""Measurement protocol: IoU, greedy matching, average precision, reports.

Detection follows the VOC-style protocol: detections sorted by descending
confidence (ties by image id, then insertion order), greedily matched to
the unclaimed same-class ground-truth box of highest IoU in their image,
TP iff that IoU >= 0.5.  AP is the all-point interpolated area under the
precision-recall curve.  Macro means average per-class values over the
classes that have at least one ground-truth instance in the split.

Classification treats every (image, class) pair as a binary decision: an
image scores a class at its proposal score (0 when not proposed), and the
per-class AP ranks all images by that score with a deterministic tie
order.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataio.types import Box, DatasetManifest
from .errors import ValidationError
from .proposer import ProposalSet

IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class Detection:
    """One predicted box with its ranking confidence."""

    image_id: str
    label: str
    box: Box
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(
                f"detection for {self.image_id}: confidence {self.confidence} outside [0, 1]"
            )


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    ap: float


@dataclass
class EvalReport:
    """Per-class and macro metrics for a split; None marks excluded classes."""

    detection_per_class: dict[str, float | None] | None = None
    detection_macro_ap50: float | None = None
    classification_per_class: dict[str, ClassMetrics | None] | None = None
    classification_macro: ClassMetrics | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc: dict = {"counts": dict(self.counts)}
        if self.detection_per_class is not None:
            doc["detection"] = {
                "per_class_ap50": dict(self.detection_per_class),
                "macro_ap50": self.detection_macro_ap50,
            }
        if self.classification_per_class is not None:
            doc["classification"] = {
                "per_class": {
                    label: None
                    if metrics is None
                    else {
                        "precision": metrics.precision,
                        "recall": metrics.recall,
                        "f1": metrics.f1,
                        "ap": metrics.ap,
                    }
                    for label, metrics in self.classification_per_class.items()
                },
                "macro": None
                if self.classification_macro is None
                else {
                    "precision": self.classification_macro.precision,
                    "recall": self.classification_macro.recall,
                    "f1": self.classification_macro.f1,
                    "ap": self.classification_macro.ap,
                },
            }
        return doc


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x1, b.x1)
    iy1 = min(a.y1, b.y1)
    inter = max(0.0, ix1 - ix0) * max(0.0, iy1 - iy0)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def match_detections(
    detections: Sequence[Detection],
    gt_boxes: Mapping[str, Sequence[Box]],
    iou_threshold: float = IOU_THRESHOLD,
) -> list[bool]:
    """Greedy single-class matching; returns TP flags in ranked order.

    ``gt_boxes`` maps image id to that image's ground-truth boxes of the
    class under evaluation.  Each ground truth can be claimed once.
    """
    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].confidence, detections[i].image_id, i),
    )
    claimed: dict[str, set[int]] = {image_id: set() for image_id in gt_boxes}
    flags: list[bool] = []
    for i in order:
        det = detections[i]
        candidates = gt_boxes.get(det.image_id, ())
        best_iou = -1.0
        best_idx = -1
        for g, gt in enumerate(candidates):
            if g in claimed.get(det.image_id, set()):
                continue
            value = iou(det.box, gt)
            if value > best_iou:
                best_iou = value
                best_idx = g
        if best_idx >= 0 and best_iou >= iou_threshold:
            claimed[det.image_id].add(best_idx)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def average_precision(flags: Sequence[bool], num_gt: int) -> float | None:
    """All-point interpolated AP from ranked TP flags.

    Returns None (undefined) when there is nothing to rank against:
    num_gt == 0 with no detections.  num_gt == 0 with detections is 0.0.
    """
    if num_gt < 0:
        raise ValidationError("num_gt must be >= 0")
    if num_gt == 0:
        return None if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    ranks = np.arange(1, len(flags) + 1, dtype=np.float64)
    precision = tp / ranks
    recall = tp / num_gt
    # Interpolate precision to its running maximum from the right.
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_recall = 0.0
    for p, r in zip(interp, recall):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


def _check_labels(labels: Iterable[str], manifest: DatasetManifest, what: str):
    vocab = set(manifest.classes)
    for label in labels:
        if label not in vocab:
            raise ValidationError(f"{what} label {label!r} outside vocabulary")


def detection_ap50(
    detections: Sequence[Detection],
    manifest: DatasetManifest,
    iou_threshold: float = IOU_THRESHOLD,
) -> EvalReport:
    """Per-class and macro AP at the given IoU threshold over a whole split."""
    _check_labels((d.label for d in detections), manifest, "detection")
    records = {rec.id: rec for rec in manifest.images}
    for det in detections:
        rec = records.get(det.image_id)
        if rec is None:
            raise ValidationError(f"detection for unknown image {det.image_id!r}")
        box = det.box
        if box.x0 < 0 or box.y0 < 0 or box.x1 > rec.width or box.y1 > rec.height:
            raise ValidationError(
                f"detection box {box.as_tuple()} outside image {det.image_id!r}"
            )

    per_class: dict[str, float | None] = {}
    included: list[float] = []
    for label in manifest.classes:
        gt_boxes = {
            rec.id: [box for l, box in rec.gt_boxes if l == label]
            for rec in manifest.images
        }
        num_gt = sum(len(v) for v in gt_boxes.values())
        class_dets = [d for d in detections if d.label == label]
        if num_gt == 0:
            per_class[label] = None  # excluded from the macro mean
            continue
        flags = match_detections(class_dets, gt_boxes, iou_threshold)
        ap = average_precision(flags, num_gt)
        per_class[label] = ap
        included.append(ap)

    macro = float(np.mean(included)) if included else None
    return EvalReport(
        detection_per_class=per_class,
        detection_macro_ap50=macro,
        counts={
            "images": len(manifest.images),
            "gt_boxes": sum(len(rec.gt_boxes) for rec in manifest.images),
            "detections": len(detections),
        },
    )


def classification_metrics(
    proposals: Sequence[ProposalSet],
    manifest: DatasetManifest,
) -> EvalReport:
    """Macro precision/recall/F1 and per-class AP over image-level labels."""
    for prop in proposals:
        _check_labels(prop.labels, manifest, "proposal")
    known_ids = {rec.id for rec in manifest.images}
    score_by_image: dict[str, dict[str, float]] = {}
    for prop in proposals:
        if prop.image_id not in known_ids:
            raise ValidationError(f"proposals for unknown image {prop.image_id!r}")
        score_by_image[prop.image_id] = dict(prop.entries)

    per_class: dict[str, ClassMetrics | None] = {}
    included: list[ClassMetrics] = []
    for label in manifest.classes:
        positives = {rec.id for rec in manifest.images if label in rec.gt_labels}
        if not positives:
            per_class[label] = None
            continue
        tp = fp = fn = 0
        ranked: list[tuple[float, str, bool]] = []
        for rec in manifest.images:
            score = score_by_image.get(rec.id, {}).get(label, 0.0)
            predicted = label in score_by_image.get(rec.id, {})
            actual = rec.id in positives
            tp += predicted and actual
            fp += predicted and not actual
            fn += actual and not predicted
            ranked.append((score, rec.id, actual))
        ranked.sort(key=lambda item: (-item[0], item[1]))
        flags = [actual for _, _, actual in ranked]
        ap = average_precision(flags, len(positives))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        metrics = ClassMetrics(precision=precision, recall=recall, f1=f1, ap=float(ap))
        per_class[label] = metrics
        included.append(metrics)

    macro = None
    if included:
        macro = ClassMetrics(
            precision=float(np.mean([m.precision for m in included])),
            recall=float(np.mean([m.recall for m in included])),
            f1=float(np.mean([m.f1 for m in included])),
            ap=float(np.mean([m.ap for m in included])),
        )
    return EvalReport(
        classification_per_class=per_class,
        classification_macro=macro,
        counts={
            "images": len(manifest.images),
            "proposal_sets": len(proposals),
            "proposal_entries": sum(len(p.entries) for p in proposals),
        },
    )


def merge_reports(detection: EvalReport | None, classification: EvalReport | None) -> EvalReport:
    merged = EvalReport()
    if detection is not None:
        merged.detection_per_class = detection.detection_per_class
        merged.detection_macro_ap50 = detection.detection_macro_ap50
        merged.counts.update(detection.counts)
    if classification is not None:
        merged.classification_per_class = classification.classification_per_class
        merged.classification_macro = classification.classification_macro
        merged.counts.update(classification.counts)
    return merged


def render_report(report: EvalReport) -> str:
    """Human-readable per-class table with a macro row."""
    lines = []
    counts = ", ".join(f"{k}={v}" for k, v in sorted(report.counts.items()))
    lines.append(f"# {counts}")
    lines.append(
        "# protocol: greedy VOC-style matching, all-point AP interpolation; "
        "classes without ground truth excluded from macro means"
    )
    if report.detection_per_class is not None:
        lines.append("")
        lines.append(f"{'class':<28} {'AP50':>8}")
        for label, ap in report.detection_per_class.items():
            shown = "-" if ap is None else f"{ap:8.4f}"
            lines.append(f"{label:<28} {shown:>8}")
        macro = report.detection_macro_ap50
        lines.append(f"{'macro':<28} {('-' if macro is None else f'{macro:8.4f}'):>8}")
    if report.classification_per_class is not None:
        lines.append("")
        lines.append(f"{'class':<28} {'P':>8} {'R':>8} {'F1':>8} {'AP':>8}")
        for label, m in report.classification_per_class.items():
            if m is None:
                lines.append(f"{label:<28} {'-':>8} {'-':>8} {'-':>8} {'-':>8}")
            else:
                lines.append(
                    f"{label:<28} {m.precision:8.4f} {m.recall:8.4f} {m.f1:8.4f} {m.ap:8.4f}"
                )
        m = report.classification_macro
        if m is None:
            lines.append(f"{'macro':<28} {'-':>8} {'-':>8} {'-':>8} {'-':>8}")
        else:
            lines.append(
                f"{'macro':<28} {m.precision:8.4f} {m.recall:8.4f} {m.f1:8.4f} {m.ap:8.4f}"
            )
    return "\n".join(lines) + "\n"
