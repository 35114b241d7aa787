"""Procedural stick-figure corpus with exact boxes and keypoints.

Every image contains a few rendered actors, one per annotation box:

* ``squat``  - a compact crouched figure with splayed knees;
* ``tumble`` - a figure lying horizontally (wide, flat box);
* ``fight``  - a pair of adjacent upright figures with raised arms
  reaching into each other's space; the box hulls both bodies.

Ground-truth boxes are the tight pixel hulls of each actor's rendered
strokes; exported keypoints are the true joint positions used for
rendering (optionally jittered / down-weighted to mimic rough
pseudo-labels). Identical seed and spec produce byte-identical output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .fileio import atomic_write_bytes
from .ingest import (
    CLASS_NAMES,
    CLASS_TO_ID,
    NUM_KEYPOINTS,
    BoxAnnotation,
    KeypointSet,
    write_box_file,
    write_keypoint_file,
    write_manifest,
)

# joint indices of the COCO skeleton used below
NOSE, L_EYE, R_EYE, L_EAR, R_EAR = 0, 1, 2, 3, 4
L_SHO, R_SHO, L_ELB, R_ELB, L_WRI, R_WRI = 5, 6, 7, 8, 9, 10
L_HIP, R_HIP, L_KNEE, R_KNEE, L_ANK, R_ANK = 11, 12, 13, 14, 15, 16

SKELETON_EDGES = (
    (L_SHO, R_SHO), (L_HIP, R_HIP),
    (L_SHO, L_ELB), (L_ELB, L_WRI), (R_SHO, R_ELB), (R_ELB, R_WRI),
    (L_SHO, L_HIP), (R_SHO, R_HIP),
    (L_HIP, L_KNEE), (L_KNEE, L_ANK), (R_HIP, R_KNEE), (R_KNEE, R_ANK),
)


@dataclass(frozen=True)
class SceneSpec:
    """Knobs of the generator; identical spec + seed => identical corpus."""

    seed: int = 0
    image_size: tuple[int, int] = (256, 128)  # (W, H), divisible by 128
    actors_per_image: tuple[int, int] = (1, 3)
    class_distribution: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    scale_range: tuple[float, float] | None = None  # actor height px; None = auto
    occlusion_rate: float = 0.0     # chance a keypoint is exported low-confidence
    keypoint_noise: float = 0.0     # px std of jitter on exported keypoints

    def resolved_scale_range(self) -> tuple[float, float]:
        if self.scale_range is not None:
            return self.scale_range
        h = self.image_size[1]
        return (0.40 * h, 0.78 * h)


def _head_and_face(head_x, head_y, h, side=1.0):
    """Nose/eyes/ears around a head center; side flips left/right."""
    pts = np.zeros((5, 2))
    pts[NOSE] = (head_x, head_y)
    pts[L_EYE] = (head_x + side * 0.025 * h, head_y - 0.015 * h)
    pts[R_EYE] = (head_x - side * 0.025 * h, head_y - 0.015 * h)
    pts[L_EAR] = (head_x + side * 0.05 * h, head_y)
    pts[R_EAR] = (head_x - side * 0.05 * h, head_y)
    return pts


def _upright_joints(h, rng, arm_raise=(0.0, 0.0), lean=0.0):
    """Standing figure of nominal height h.

    arm_raise = (left, right) in [0, 1]: 0 hangs the arm, 1 extends it
    horizontally (left = +x side).
    """
    j = np.zeros((NUM_KEYPOINTS, 2))
    jit = lambda s: rng.normal(0.0, s * h)
    head_x = lean * h + jit(0.01)
    j[:5] = _head_and_face(head_x, 0.08 * h, h)
    sho_y = 0.22 * h + jit(0.01)
    j[L_SHO] = (head_x + 0.11 * h + jit(0.01), sho_y)
    j[R_SHO] = (head_x - 0.11 * h + jit(0.01), sho_y)
    for side, sho, elb, wri in ((0, L_SHO, L_ELB, L_WRI), (1, R_SHO, R_ELB, R_WRI)):
        raise_amt = arm_raise[side]
        sign = 1.0 if side == 0 else -1.0
        elb_dy = (0.13 - 0.10 * raise_amt) * h
        wri_dy = (0.25 - 0.25 * raise_amt) * h
        elb_dx = sign * (0.03 + 0.12 * raise_amt) * h
        wri_dx = sign * (0.045 + 0.33 * raise_amt) * h
        j[elb] = j[sho] + (elb_dx + jit(0.01), elb_dy + jit(0.01))
        j[wri] = j[sho] + (wri_dx + jit(0.015), wri_dy + jit(0.015))
    hip_y = 0.52 * h + jit(0.01)
    j[L_HIP] = (head_x + 0.075 * h, hip_y)
    j[R_HIP] = (head_x - 0.075 * h, hip_y)
    j[L_KNEE] = (head_x + 0.08 * h + jit(0.01), 0.745 * h + jit(0.01))
    j[R_KNEE] = (head_x - 0.08 * h + jit(0.01), 0.745 * h + jit(0.01))
    j[L_ANK] = (head_x + 0.075 * h + jit(0.01), 0.97 * h + jit(0.01))
    j[R_ANK] = (head_x - 0.075 * h + jit(0.01), 0.97 * h + jit(0.01))
    return j


def _squat_joints(h, rng):
    """Crouched figure: compressed height, knees splayed wide."""
    j = np.zeros((NUM_KEYPOINTS, 2))
    jit = lambda s: rng.normal(0.0, s * h)
    head_x = jit(0.01)
    j[:5] = _head_and_face(head_x, 0.10 * h, h)
    sho_y = 0.22 * h + jit(0.01)
    j[L_SHO] = (head_x + 0.11 * h + jit(0.01), sho_y)
    j[R_SHO] = (head_x - 0.11 * h + jit(0.01), sho_y)
    hip_y = 0.385 * h + jit(0.008)
    j[L_HIP] = (head_x + 0.075 * h, hip_y)
    j[R_HIP] = (head_x - 0.075 * h, hip_y)
    knee_y = 0.40 * h + jit(0.008)
    spread = 0.195 * h + jit(0.012)
    j[L_KNEE] = (head_x + spread, knee_y)
    j[R_KNEE] = (head_x - spread, knee_y)
    j[L_ANK] = (head_x + 0.16 * h + jit(0.01), 0.555 * h + jit(0.008))
    j[R_ANK] = (head_x - 0.16 * h + jit(0.01), 0.555 * h + jit(0.008))
    # forearms resting across the knees
    j[L_ELB] = (head_x + 0.14 * h + jit(0.01), 0.33 * h + jit(0.01))
    j[R_ELB] = (head_x - 0.14 * h + jit(0.01), 0.33 * h + jit(0.01))
    j[L_WRI] = (head_x + 0.10 * h + jit(0.01), 0.40 * h + jit(0.01))
    j[R_WRI] = (head_x - 0.10 * h + jit(0.01), 0.40 * h + jit(0.01))
    return j


def _tumble_joints(h, rng):
    """Figure lying horizontally; long flat silhouette."""
    raise_amt = rng.uniform(0.05, 0.3)
    j = _upright_joints(h, rng, arm_raise=(raise_amt, raise_amt))
    angle = math.radians(90.0 + rng.uniform(-6.0, 6.0)) * rng.choice([-1.0, 1.0])
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    j = j @ rot.T
    # flatten the cross-body axis so the box stays thin
    j[:, 1] *= 0.7
    return j


def _fight_pair(h, rng):
    """Two upright figures punching toward each other; limb boxes overlap."""
    # only the inward-facing arm is fully extended, keeping the pair's
    # silhouette clearly narrower than a lying figure
    a = _upright_joints(h, rng, arm_raise=(rng.uniform(0.85, 1.0), rng.uniform(0.2, 0.45)))
    b = _upright_joints(h, rng, arm_raise=(rng.uniform(0.85, 1.0), rng.uniform(0.2, 0.45)))
    b[:, 0] = -b[:, 0]  # mirror B to face A
    gap = rng.uniform(0.55, 0.75) * h
    b[:, 0] += gap
    b[:, 1] += rng.normal(0.0, 0.02 * h)
    return [a, b]


def build_actor(class_id: int, h: float, rng) -> list[np.ndarray]:
    """Joint arrays (one per person) for an actor of the given class."""
    if class_id == CLASS_TO_ID["squat"]:
        return [_squat_joints(h, rng)]
    if class_id == CLASS_TO_ID["tumble"]:
        return [_tumble_joints(h, rng)]
    return _fight_pair(h, rng)


def _render_persons(persons: list[np.ndarray], size: tuple[int, int], stroke: int,
                    head_r: float) -> Image.Image:
    """Draw skeletons on a fresh L-mode mask; nonzero pixels are the figure."""
    mask = Image.new("L", size, 0)
    draw = ImageDraw.Draw(mask)
    for j in persons:
        for a, b in SKELETON_EDGES:
            draw.line([tuple(j[a]), tuple(j[b])], fill=255, width=stroke)
        neck = (j[L_SHO] + j[R_SHO]) / 2
        draw.line([tuple(j[NOSE]), tuple(neck)], fill=255, width=stroke)
        cx, cy = j[NOSE]
        draw.ellipse([cx - head_r, cy - head_r, cx + head_r, cy + head_r], fill=255)
    return mask


def heuristic_class(box: tuple[float, float, float, float],
                    keypoint_sets: list[KeypointSet]) -> int:
    """Trivial silhouette classifier: box aspect plus a raised-wrist statistic.

    Used as a corpus sanity check (the classes must be separable before a
    detector can be expected to overfit them).
    """
    x0, y0, x1, y1 = box
    w, hgt = x1 - x0, y1 - y0
    if w / max(hgt, 1e-9) > 1.6:
        return CLASS_TO_ID["tumble"]
    wrist_rel = []
    for ks in keypoint_sets:
        cx, cy = ks.xy.mean(axis=0)
        if not (x0 <= cx <= x1 and y0 <= cy <= y1):
            continue
        for k in (L_WRI, R_WRI):
            wrist_rel.append((ks.xy[k, 1] - y0) / max(hgt, 1e-9))
    if wrist_rel and min(wrist_rel) < 0.42:
        return CLASS_TO_ID["fight"]
    return CLASS_TO_ID["squat"]


def _place_actor(persons, size, stroke, margin, rng, existing_boxes, max_tries=30):
    """Translate joints to a random in-frame spot with limited box overlap."""
    w, h = size
    pts = np.concatenate(persons)
    lo = pts.min(axis=0) - (stroke + margin)
    hi = pts.max(axis=0) + (stroke + margin)
    span = hi - lo
    if span[0] >= w or span[1] >= h:
        return None
    from .postprocess import iou_xyxy

    for _ in range(max_tries):
        ox = rng.uniform(-lo[0], w - lo[0] - span[0])
        oy = rng.uniform(-lo[1], h - lo[1] - span[1])
        box = (lo[0] + ox, lo[1] + oy, hi[0] + ox, hi[1] + oy)
        if all(iou_xyxy(box, eb) < 0.25 for eb in existing_boxes):
            return [j + np.array([ox, oy]) for j in persons], box
    return None


def generate_image(spec: SceneSpec, rng):
    """One scene: (pixels uint8 HxWx3, boxes, keypoint sets)."""
    w, h = spec.image_size
    background = int(rng.integers(15, 50))
    canvas = np.full((h, w, 3), background, dtype=np.uint8)

    n_actors = int(rng.integers(spec.actors_per_image[0], spec.actors_per_image[1] + 1))
    boxes: list[BoxAnnotation] = []
    all_persons: list[np.ndarray] = []
    rough_boxes: list[tuple] = []

    for _ in range(n_actors):
        class_id = int(rng.choice(len(CLASS_NAMES), p=np.asarray(spec.class_distribution)))
        height = float(rng.uniform(*spec.resolved_scale_range()))
        persons = build_actor(class_id, height, rng)
        stroke = max(1, int(round(0.05 * height)))
        head_r = 0.075 * height
        placed = _place_actor(persons, spec.image_size, stroke, head_r, rng, rough_boxes)
        if placed is None:
            continue
        persons, rough_box = placed
        mask = _render_persons(persons, spec.image_size, stroke, head_r)
        bbox = mask.getbbox()
        if bbox is None:
            continue
        brightness = int(rng.integers(170, 255))
        m = np.asarray(mask) > 0
        canvas[m] = brightness
        boxes.append(BoxAnnotation(class_id=class_id,
                                   box=tuple(float(v) for v in bbox)))
        rough_boxes.append(rough_box)
        all_persons.extend(persons)

    keypoint_sets = []
    for i, joints in enumerate(all_persons):
        xy = joints.copy()
        if spec.keypoint_noise > 0:
            xy = xy + rng.normal(0.0, spec.keypoint_noise, size=xy.shape)
        conf = rng.uniform(0.5, 1.0, size=len(xy))
        if spec.occlusion_rate > 0:
            occluded = rng.random(len(xy)) < spec.occlusion_rate
            conf = np.where(occluded, rng.uniform(0.0, 0.1, size=len(xy)), conf)
        keypoint_sets.append(
            KeypointSet(person_index=i, xy=xy, confidence=conf, present=conf > 0.1)
        )
    return canvas, boxes, keypoint_sets


def generate_corpus(spec: SceneSpec, n_images: int, out_dir: str | Path) -> Path:
    """Write images + XML boxes + JSON keypoints + manifest; returns manifest path."""
    out_dir = Path(out_dir)
    for sub in ("images", "annotations", "keypoints"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    root_seq = np.random.SeedSequence(spec.seed)
    records = []
    for i, child in enumerate(root_seq.spawn(n_images)):
        rng = np.random.default_rng(child)
        image_id = f"img_{i:05d}"
        pixels, boxes, keypoint_sets = generate_image(spec, rng)

        import io as _io

        buf = _io.BytesIO()
        Image.fromarray(pixels).save(buf, format="PNG")
        atomic_write_bytes(out_dir / "images" / f"{image_id}.png", buf.getvalue())
        write_box_file(out_dir / "annotations" / f"{image_id}.xml", boxes,
                       spec.image_size, f"{image_id}.png")
        write_keypoint_file(out_dir / "keypoints" / f"{image_id}.json", keypoint_sets)
        records.append(
            {
                "image_id": image_id,
                "image": f"images/{image_id}.png",
                "boxes": f"annotations/{image_id}.xml",
                "keypoints": f"keypoints/{image_id}.json",
                "width": spec.image_size[0],
                "height": spec.image_size[1],
                "seed": spec.seed,
            }
        )

    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
