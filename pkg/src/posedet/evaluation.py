"""Average-precision evaluation over IoU 0.5:0.05:0.95, per class and overall.

Matching is the standard greedy protocol: detections in descending score
order, each ground-truth box matched at most once, same class only, ties
broken by highest IoU. AP uses 101-point interpolation of the
monotone-decreasing precision envelope; mAP averages per-class AP over
the ten thresholds. Classes with no ground truth are excluded from the
means and reported as NaN.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .ingest import CLASS_NAMES, BoxAnnotation
from .postprocess import Detection, iou_xyxy

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_GRID = np.linspace(0.0, 1.0, 101)


def match_detections(
    dets_by_image: dict[str, list[Detection]],
    gts_by_image: dict[str, list[BoxAnnotation]],
    iou_thresh: float,
    class_id: int,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Flag every class-``class_id`` detection TP/FP at one IoU threshold.

    Returns (scores desc, tp flags, n_gt). A detection is TP iff it overlaps
    an unmatched same-class ground-truth box in its image with IoU >= thresh.
    """
    pool = []
    for image_id in sorted(dets_by_image):
        for d in dets_by_image[image_id]:
            if d.class_id == class_id:
                pool.append((image_id, d))
    pool.sort(key=lambda e: (-e[1].score, e[0], e[1].box[0], e[1].box[1]))

    gt_boxes = {
        image_id: [g for g in gts if g.class_id == class_id]
        for image_id, gts in gts_by_image.items()
    }
    n_gt = sum(len(v) for v in gt_boxes.values())
    matched = {image_id: [False] * len(v) for image_id, v in gt_boxes.items()}

    scores = np.empty(len(pool))
    tp = np.zeros(len(pool), dtype=bool)
    for i, (image_id, det) in enumerate(pool):
        scores[i] = det.score
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gt_boxes.get(image_id, [])):
            if matched[image_id][j]:
                continue
            iou = iou_xyxy(det.box, gt.box)
            if iou >= iou_thresh and iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            matched[image_id][best_j] = True
            tp[i] = True
    return scores, tp, n_gt


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from TP flags ordered by descending score."""
    if n_gt == 0:
        return math.nan
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # monotone-decreasing envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class ClassEval:
    class_id: int
    class_name: str
    n_gt: int
    ap_by_iou: list[float]  # one AP per threshold in IOU_THRESHOLDS

    @property
    def ap50(self) -> float:
        return self.ap_by_iou[0]

    @property
    def ap75(self) -> float:
        return self.ap_by_iou[5]

    @property
    def ap(self) -> float:
        return float(np.mean(self.ap_by_iou)) if self.n_gt > 0 else math.nan


@dataclass
class EvalReport:
    classes: list[ClassEval]
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS
    pr_curves: dict = field(default_factory=dict)  # (class_id, thresh) -> {recall, precision}

    def _mean_over_classes(self, values) -> float:
        vals = [v for v in values if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def ap50(self) -> float:
        return self._mean_over_classes(c.ap50 if c.n_gt else math.nan for c in self.classes)

    @property
    def ap75(self) -> float:
        return self._mean_over_classes(c.ap75 if c.n_gt else math.nan for c in self.classes)

    @property
    def map(self) -> float:
        return self._mean_over_classes(c.ap for c in self.classes)

    def map_at(self, thresh_index: int) -> float:
        return self._mean_over_classes(
            c.ap_by_iou[thresh_index] if c.n_gt else math.nan for c in self.classes
        )

    def to_json(self) -> dict:
        return {
            "iou_thresholds": list(self.iou_thresholds),
            "ap50": self.ap50,
            "ap75": self.ap75,
            "map": self.map,
            "classes": [
                {
                    "class_id": c.class_id,
                    "class_name": c.class_name,
                    "labels": c.n_gt,
                    "ap_by_iou": c.ap_by_iou,
                    "ap50": c.ap50,
                    "ap75": c.ap75,
                    "map": c.ap,
                }
                for c in self.classes
            ],
        }

    def render_class_table(self) -> str:
        """Per-behavior results in the two-row Labels/mAP layout."""
        names = [c.class_name for c in self.classes]
        widths = [max(8, len(n) + 2) for n in names]
        head = "Behavior | " + " ".join(n.rjust(w) for n, w in zip(names, widths))
        labels = "Labels   | " + " ".join(str(c.n_gt).rjust(w) for c, w in zip(self.classes, widths))
        maps = "mAP      | " + " ".join(
            (f"{100 * c.ap:.1f}" if not math.isnan(c.ap) else "-").rjust(w)
            for c, w in zip(self.classes, widths)
        )
        rule = "-" * len(head)
        return "\n".join([head, rule, labels, maps])


def evaluate_detections(
    dets_by_image: dict[str, list[Detection]],
    gts_by_image: dict[str, list[BoxAnnotation]],
    num_classes: int = len(CLASS_NAMES),
    iou_thresholds: tuple[float, ...] = IOU_THRESHOLDS,
    keep_curves: bool = True,
) -> EvalReport:
    """Score detections against ground truth for every class and threshold."""
    classes = []
    curves = {}
    for class_id in range(num_classes):
        name = CLASS_NAMES[class_id] if class_id < len(CLASS_NAMES) else str(class_id)
        ap_by_iou = []
        n_gt_final = 0
        for thresh in iou_thresholds:
            scores, tp, n_gt = match_detections(dets_by_image, gts_by_image, thresh, class_id)
            n_gt_final = n_gt
            ap_by_iou.append(average_precision(tp, n_gt))
            if keep_curves and n_gt:
                cum_tp = np.cumsum(tp.astype(np.float64))
                cum_fp = np.cumsum((~tp).astype(np.float64))
                curves[(class_id, thresh)] = {
                    "recall": (cum_tp / n_gt).tolist(),
                    "precision": (cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)).tolist(),
                    "scores": scores.tolist(),
                }
        classes.append(ClassEval(class_id=class_id, class_name=name,
                                 n_gt=n_gt_final, ap_by_iou=ap_by_iou))
    return EvalReport(classes=classes, iou_thresholds=iou_thresholds, pr_curves=curves)


def split_image_ids(image_ids, val_fraction: float = 0.2):
    """Deterministic train/val split by md5 of the image id (stable across runs)."""
    train, val = [], []
    for image_id in image_ids:
        digest = hashlib.md5(str(image_id).encode("utf-8")).hexdigest()
        bucket = int(digest, 16) % 100
        (val if bucket < int(round(100 * val_fraction)) else train).append(image_id)
    return train, val


def render_ablation_table(rows: list[dict]) -> str:
    """Rows {method, resnet, pose, T, ap50, ap75, map} in the comparison layout."""
    header = f"{'Method':<12} | {'resnet':>6} {'pose':>5} {'T':>2} | {'AP50':>6} {'AP75':>6} {'mAP':>6}"
    rule = "-" * len(header)
    lines = [header, rule]
    for r in rows:
        lines.append(
            f"{r['method']:<12} | {str(r['resnet']):>6} {('yes' if r['pose'] else 'no'):>5} "
            f"{r['T']:>2} | {100 * r['ap50']:>6.1f} {100 * r['ap75']:>6.1f} {100 * r['map']:>6.1f}"
        )
    return "\n".join(lines)
