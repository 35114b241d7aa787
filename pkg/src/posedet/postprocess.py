"""Decode dense prediction maps into scored, suppressed detections.

Candidate score is sigmoid(class logit) * sigmoid(center-ness logit) so
off-center boxes are down-weighted; survivors go through class-wise
greedy NMS with a deterministic tie-break.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ingest import CLASS_NAMES
from .targets import LevelSpec, location_grid

DEFAULT_SCORE_THRESH = 0.05
DEFAULT_LEVEL_TOPK = 1000
DEFAULT_NMS_IOU = 0.6
DEFAULT_MAX_DETECTIONS = 100


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]


@dataclass(frozen=True)
class DecodeParams:
    score_thresh: float = DEFAULT_SCORE_THRESH
    level_topk: int = DEFAULT_LEVEL_TOPK
    nms_iou: float = DEFAULT_NMS_IOU
    max_detections: int = DEFAULT_MAX_DETECTIONS


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def iou_xyxy(a, b) -> float:
    """IoU of two (x0, y0, x1, y1) boxes."""
    ix0, iy0 = max(a[0], b[0]), max(a[1], b[1])
    ix1, iy1 = min(a[2], b[2]), min(a[3], b[3])
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    if inter == 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def decode_level(
    cls_logits: np.ndarray,
    ctr_logits: np.ndarray,
    reg_dist: np.ndarray,
    level: LevelSpec,
    input_size: tuple[int, int],
    score_thresh: float = DEFAULT_SCORE_THRESH,
    topk: int = DEFAULT_LEVEL_TOPK,
) -> list[Detection]:
    """Decode one level's maps into at most ``topk`` thresholded detections.

    cls_logits (C, H, W); ctr_logits (H, W) or (1, H, W); reg_dist (4, H, W)
    already passed through the per-level exp transform.
    """
    w, h = input_size
    if ctr_logits.ndim == 3:
        ctr_logits = ctr_logits[0]
    scores = _sigmoid(cls_logits) * _sigmoid(ctr_logits)[None]  # (C, H, W)
    grid = location_grid(level, input_size)

    num_classes = scores.shape[0]
    flat = scores.reshape(num_classes, -1)
    keep_c, keep_i = np.nonzero(flat > score_thresh)
    if keep_c.size == 0:
        return []
    keep_scores = flat[keep_c, keep_i]
    if keep_scores.size > topk:
        order = np.argsort(-keep_scores, kind="stable")[:topk]
        keep_c, keep_i, keep_scores = keep_c[order], keep_i[order], keep_scores[order]

    gx = grid[..., 0].reshape(-1)[keep_i]
    gy = grid[..., 1].reshape(-1)[keep_i]
    l, t, r, b = reg_dist.reshape(4, -1)[:, keep_i]
    x0 = np.clip(gx - l, 0.0, w)
    y0 = np.clip(gy - t, 0.0, h)
    x1 = np.clip(gx + r, 0.0, w)
    y1 = np.clip(gy + b, 0.0, h)

    dets = []
    for ci, sc, a0, b0, a1, b1 in zip(keep_c, keep_scores, x0, y0, x1, y1):
        if a0 >= a1 or b0 >= b1:  # fully clipped out
            continue
        dets.append(Detection(class_id=int(ci), score=float(sc),
                              box=(float(a0), float(b0), float(a1), float(b1))))
    return dets


def nms(detections: list[Detection], iou_thresh: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Class-wise greedy NMS, descending score, suppressing IoU > iou_thresh.

    Tie order is (score desc, x_min asc, y_min asc) so the result does not
    depend on input order.
    """
    ordered = sorted(detections, key=lambda d: (-d.score, d.box[0], d.box[1], d.class_id))
    kept: list[Detection] = []
    for det in ordered:
        suppressed = False
        for k in kept:
            if k.class_id == det.class_id and iou_xyxy(k.box, det.box) > iou_thresh:
                suppressed = True
                break
        if not suppressed:
            kept.append(det)
    return kept


def decode_outputs(
    outputs,
    levels: tuple[LevelSpec, ...],
    input_size: tuple[int, int],
    params: DecodeParams = DecodeParams(),
    batch_index: int = 0,
) -> list[Detection]:
    """Decode one image of a NetworkOutputs batch end to end."""
    candidates: list[Detection] = []
    for lv, cls_l, ctr_l, reg_d in zip(levels, outputs.cls_logits, outputs.ctr_logits,
                                       outputs.reg_dist):
        candidates.extend(
            decode_level(
                np.asarray(cls_l[batch_index].detach().cpu().numpy(), dtype=np.float64),
                np.asarray(ctr_l[batch_index].detach().cpu().numpy(), dtype=np.float64),
                np.asarray(reg_d[batch_index].detach().cpu().numpy(), dtype=np.float64),
                lv, input_size, params.score_thresh, params.level_topk,
            )
        )
    kept = nms(candidates, params.nms_iou)
    return kept[: params.max_detections]


# --- serialization and overlays ---


def detections_to_records(image_id: str, detections: list[Detection]) -> list[dict]:
    return [
        {
            "image_id": image_id,
            "class_id": d.class_id,
            "class_name": CLASS_NAMES[d.class_id] if d.class_id < len(CLASS_NAMES) else str(d.class_id),
            "score": d.score,
            "box": list(d.box),
        }
        for d in detections
    ]


def detections_from_records(records: list[dict]) -> dict[str, list[Detection]]:
    by_image: dict[str, list[Detection]] = {}
    for r in records:
        by_image.setdefault(r["image_id"], []).append(
            Detection(class_id=int(r["class_id"]), score=float(r["score"]),
                      box=tuple(float(v) for v in r["box"]))
        )
    return by_image


CLASS_COLORS = ((255, 64, 64), (64, 160, 255), (64, 255, 96))


def render_overlay(pixels: np.ndarray, detections: list[Detection], path: str | Path,
                   score_thresh: float = 0.0) -> None:
    """Draw class-colored detection boxes onto the image and save a PNG."""
    from PIL import Image, ImageDraw

    from .fileio import atomic_write_bytes
    import io as _io

    img = Image.fromarray(pixels).convert("RGB")
    draw = ImageDraw.Draw(img)
    for d in detections:
        if d.score < score_thresh:
            continue
        color = CLASS_COLORS[d.class_id % len(CLASS_COLORS)]
        draw.rectangle(d.box, outline=color, width=2)
        label = f"{CLASS_NAMES[d.class_id] if d.class_id < len(CLASS_NAMES) else d.class_id}:{d.score:.2f}"
        draw.text((d.box[0] + 2, max(0.0, d.box[1] - 11)), label, fill=color)
    buf = _io.BytesIO()
    img.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
