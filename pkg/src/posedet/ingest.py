"""Annotation ingest: box XML files, keypoint JSON files, corpus manifests.

Geometry conventions for the whole pipeline live here:

* boxes are (x_min, y_min, x_max, y_max) in image pixels, min strictly
  less than max;
* keypoints follow the 17-joint COCO skeleton by default, with
  per-point confidence; confidence at or below ``KP_CONF_THRESHOLD``
  marks the point absent;
* the standard network input is 1152x768 (3:2); sources with a
  different aspect ratio are padded bottom/right with black before
  resizing so annotations only ever need scaling.

File formats are documented in docs/data_formats.md.
"""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ArityMismatch,
    DegenerateBox,
    EmptyAfterClip,
    MalformedAnnotation,
    UnknownClass,
)
from .fileio import atomic_write_bytes, read_jsonl, write_jsonl

# Behavior classes, in this fixed id order. Reports and class maps all
# use these ids.
CLASS_NAMES = ("fight", "tumble", "squat")
CLASS_TO_ID = {name: i for i, name in enumerate(CLASS_NAMES)}
NUM_CLASSES = len(CLASS_NAMES)

# COCO 17-joint skeleton; the keypoint files we ingest carry one
# (x, y, confidence) triple per joint in this order.
COCO_KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
NUM_KEYPOINTS = len(COCO_KEYPOINT_NAMES)

# Left/right channel pairs, used when a sample is horizontally flipped.
HFLIP_PAIRS = ((1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16))

# Points at or below this confidence are treated as absent. Pseudo-label
# keypoints are rough; low-confidence points would corrupt heatmap targets.
KP_CONF_THRESHOLD = 0.1

# Standard (W, H) network input.
INPUT_SIZE = (1152, 768)


@dataclass(frozen=True)
class BoxAnnotation:
    """One labeled behavior box: class id plus (x_min, y_min, x_max, y_max)."""

    class_id: int
    box: tuple[float, float, float, float]

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return (x1 - x0) * (y1 - y0)


@dataclass(eq=False)
class KeypointSet:
    """Keypoints of one person: (K, 2) coordinates, confidence, presence flags."""

    person_index: int
    xy: np.ndarray          # (K, 2) float64, pixels
    confidence: np.ndarray  # (K,) float64 in [0, 1]
    present: np.ndarray     # (K,) bool

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return (
            self.person_index == other.person_index
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.confidence, other.confidence)
            and np.array_equal(self.present, other.present)
        )

    @property
    def num_keypoints(self) -> int:
        return self.xy.shape[0]


@dataclass
class ImageSample:
    """One keyframe with its annotations. ``source_size`` is (W, H) of ``pixels``."""

    image_id: str
    pixels: np.ndarray  # (H, W, 3) uint8
    boxes: list[BoxAnnotation] = field(default_factory=list)
    keypoints: list[KeypointSet] = field(default_factory=list)
    source_size: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.source_size == (0, 0):
            h, w = self.pixels.shape[:2]
            self.source_size = (w, h)


def parse_box_file(path: str | Path, class_to_id: dict[str, int] | None = None) -> list[BoxAnnotation]:
    """Parse a Pascal-VOC-style XML annotation file into box records.

    Coordinate order is normalized so min < max. Unknown class names and
    zero-area boxes are rejected rather than skipped.
    """
    class_to_id = CLASS_TO_ID if class_to_id is None else class_to_id
    try:
        root = ET.parse(str(path)).getroot()
    except (ET.ParseError, OSError) as exc:
        raise MalformedAnnotation(f"{path}: {exc}") from exc

    boxes = []
    for obj in root.iter("object"):
        name_el = obj.find("name")
        bb = obj.find("bndbox")
        if name_el is None or name_el.text is None or bb is None:
            raise MalformedAnnotation(f"{path}: object missing name or bndbox")
        name = name_el.text.strip()
        if name not in class_to_id:
            raise UnknownClass(f"{path}: unknown class name {name!r}")
        try:
            coords = [float(bb.find(tag).text) for tag in ("xmin", "ymin", "xmax", "ymax")]
        except (TypeError, ValueError, AttributeError) as exc:
            raise MalformedAnnotation(f"{path}: bad bndbox coordinates") from exc
        x0, x1 = sorted(coords[0::2])
        y0, y1 = sorted(coords[1::2])
        if x0 == x1 or y0 == y1:
            raise DegenerateBox(f"{path}: zero-area box {coords}")
        boxes.append(BoxAnnotation(class_id=class_to_id[name], box=(x0, y0, x1, y1)))
    return boxes


def write_box_file(
    path: str | Path,
    boxes: list[BoxAnnotation],
    image_size: tuple[int, int],
    image_name: str = "",
    class_names: tuple[str, ...] = CLASS_NAMES,
) -> None:
    """Write boxes as Pascal-VOC-style XML (the format parse_box_file reads)."""
    w, h = image_size
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = image_name
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(w)
    ET.SubElement(size, "height").text = str(h)
    ET.SubElement(size, "depth").text = "3"
    for b in boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = class_names[b.class_id]
        bb = ET.SubElement(obj, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"), b.box):
            ET.SubElement(bb, tag).text = repr(float(v))
    tree = ET.ElementTree(root)
    ET.indent(tree)
    atomic_write_bytes(path, ET.tostring(root, encoding="utf-8"))


def parse_keypoint_file(
    path: str | Path,
    num_keypoints: int = NUM_KEYPOINTS,
    conf_threshold: float = KP_CONF_THRESHOLD,
) -> list[KeypointSet]:
    """Parse a per-image keypoint JSON file (one flat 3K triple list per person).

    Confidence <= ``conf_threshold`` flags the point absent; coordinates are
    kept as written, never zero-filled.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (json.JSONDecodeError, OSError) as exc:
        raise MalformedAnnotation(f"{path}: {exc}") from exc
    if not isinstance(data, list):
        raise MalformedAnnotation(f"{path}: expected a JSON list of persons")

    out = []
    for i, person in enumerate(data):
        if not isinstance(person, dict) or "keypoints" not in person:
            raise MalformedAnnotation(f"{path}: person {i} has no 'keypoints' field")
        flat = person["keypoints"]
        if not isinstance(flat, list) or not all(isinstance(v, (int, float)) for v in flat):
            raise MalformedAnnotation(f"{path}: person {i} keypoints must be a number list")
        if len(flat) != 3 * num_keypoints:
            raise ArityMismatch(
                f"{path}: person {i} has {len(flat)} values, expected {3 * num_keypoints}"
            )
        arr = np.asarray(flat, dtype=np.float64).reshape(num_keypoints, 3)
        out.append(
            KeypointSet(
                person_index=i,
                xy=arr[:, :2].copy(),
                confidence=arr[:, 2].copy(),
                present=arr[:, 2] > conf_threshold,
            )
        )
    return out


def write_keypoint_file(path: str | Path, keypoint_sets: list[KeypointSet]) -> None:
    """Write keypoint sets in the JSON format parse_keypoint_file reads."""
    persons = []
    for ks in keypoint_sets:
        flat = np.concatenate([ks.xy, ks.confidence[:, None]], axis=1).reshape(-1)
        persons.append({"keypoints": [float(v) for v in flat]})
    atomic_write_bytes(path, json.dumps(persons, indent=1).encode("utf-8"))


def _pad_to_aspect(pixels: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Pad bottom/right with black until the pixel aspect matches target's."""
    h, w = pixels.shape[:2]
    tw, th = target
    if w * th == h * tw:
        return pixels
    if w * th < h * tw:
        # too narrow: pad width
        pad_w = -(-h * tw // th) - w  # ceil division
        return np.pad(pixels, ((0, 0), (0, pad_w), (0, 0)))
    pad_h = -(-w * th // tw) - h
    return np.pad(pixels, ((0, pad_h), (0, 0), (0, 0)))


def standardize_sample(sample: ImageSample, target: tuple[int, int] = INPUT_SIZE) -> ImageSample:
    """Resize a sample to the standard input size, rescaling all annotations.

    Non-target-aspect sources are padded bottom/right first, which keeps the
    top-left origin so boxes and keypoints only need scaling. A box that
    collapses to zero area after clipping raises EmptyAfterClip.
    """
    tw, th = target
    padded = _pad_to_aspect(sample.pixels, target)
    ph, pw = padded.shape[:2]
    if (pw, ph) == (tw, th):
        resized = padded
    else:
        resized = np.asarray(
            Image.fromarray(padded).resize((tw, th), Image.BILINEAR), dtype=np.uint8
        )
    sx = tw / pw
    sy = th / ph

    boxes = []
    for b in sample.boxes:
        x0, y0, x1, y1 = b.box
        x0, x1 = x0 * sx, x1 * sx
        y0, y1 = y0 * sy, y1 * sy
        x0, x1 = max(0.0, min(x0, tw)), max(0.0, min(x1, tw))
        y0, y1 = max(0.0, min(y0, th)), max(0.0, min(y1, th))
        if x0 >= x1 or y0 >= y1:
            raise EmptyAfterClip(
                f"{sample.image_id}: box {b.box} (class {b.class_id}) is empty after "
                f"scaling to {tw}x{th} and clipping"
            )
        boxes.append(BoxAnnotation(class_id=b.class_id, box=(x0, y0, x1, y1)))

    keypoints = [
        replace(ks, xy=ks.xy * np.array([sx, sy]), confidence=ks.confidence.copy(),
                present=ks.present.copy())
        for ks in sample.keypoints
    ]
    return ImageSample(
        image_id=sample.image_id,
        pixels=resized,
        boxes=boxes,
        keypoints=keypoints,
        source_size=(tw, th),
    )


def hflip_sample(sample: ImageSample, flip_pairs=HFLIP_PAIRS) -> ImageSample:
    """Mirror a sample horizontally, swapping left/right keypoint channels."""
    w = sample.source_size[0]
    pixels = sample.pixels[:, ::-1].copy()
    boxes = [
        BoxAnnotation(class_id=b.class_id, box=(w - b.box[2], b.box[1], w - b.box[0], b.box[3]))
        for b in sample.boxes
    ]
    perm = np.arange(sample.keypoints[0].num_keypoints if sample.keypoints else NUM_KEYPOINTS)
    for a, b in flip_pairs:
        if a < len(perm) and b < len(perm):
            perm[a], perm[b] = perm[b], perm[a]
    keypoints = []
    for ks in sample.keypoints:
        xy = ks.xy[perm].copy()
        xy[:, 0] = w - xy[:, 0]
        keypoints.append(
            KeypointSet(
                person_index=ks.person_index,
                xy=xy,
                confidence=ks.confidence[perm].copy(),
                present=ks.present[perm].copy(),
            )
        )
    return ImageSample(
        image_id=sample.image_id,
        pixels=pixels,
        boxes=boxes,
        keypoints=keypoints,
        source_size=sample.source_size,
    )


# --- corpus manifest ---


def write_manifest(path: str | Path, records: list[dict]) -> None:
    """Write a JSON-lines corpus manifest; paths inside are manifest-relative."""
    write_jsonl(path, records)


def load_manifest(path: str | Path) -> list[dict]:
    return read_jsonl(path)


def load_sample(record: dict, root: str | Path,
                num_keypoints: int = NUM_KEYPOINTS,
                conf_threshold: float = KP_CONF_THRESHOLD) -> ImageSample:
    """Materialize one manifest record into an ImageSample."""
    root = Path(root)
    pixels = np.asarray(Image.open(root / record["image"]).convert("RGB"), dtype=np.uint8)
    boxes = parse_box_file(root / record["boxes"]) if record.get("boxes") else []
    keypoints = (
        parse_keypoint_file(root / record["keypoints"], num_keypoints, conf_threshold)
        if record.get("keypoints")
        else []
    )
    return ImageSample(image_id=record["image_id"], pixels=pixels, boxes=boxes, keypoints=keypoints)


def load_corpus(manifest_path: str | Path,
                num_keypoints: int = NUM_KEYPOINTS,
                conf_threshold: float = KP_CONF_THRESHOLD) -> list[ImageSample]:
    """Load every sample referenced by a manifest."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    return [
        load_sample(rec, root, num_keypoints, conf_threshold)
        for rec in load_manifest(manifest_path)
    ]
