"""Annotation/prediction files, raw image tensors, top-down cropping and synthetic data."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import AnnotationError, ShapeError
from .seeding import derive_seed


@dataclass
class AnnotationRecord:
    id: int
    image_id: int
    bbox: tuple
    keypoints: np.ndarray  # [J, 3] of (x, y, v)
    area: float
    category_id: int = 1
    iscrowd: int = 0
    head_size: float | None = None

    @property
    def num_joints(self) -> int:
        return self.keypoints.shape[0]

    @property
    def num_labeled(self) -> int:
        return int((self.keypoints[:, 2] > 0).sum())

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "image_id": self.image_id,
            "category_id": self.category_id,
            "bbox": [float(v) for v in self.bbox],
            "keypoints": [float(v) for v in self.keypoints.reshape(-1)],
            "num_keypoints": self.num_labeled,
            "area": float(self.area),
            "iscrowd": self.iscrowd,
        }
        if self.head_size is not None:
            out["head_size"] = float(self.head_size)
        return out


@dataclass
class PredictionRecord:
    image_id: int
    score: float
    keypoints: np.ndarray  # [J, 3] of (x, y, confidence)
    annotation_id: int | None = None
    category_id: int = 1

    def to_json(self) -> dict:
        out = {
            "image_id": self.image_id,
            "category_id": self.category_id,
            "score": float(self.score),
            "keypoints": [float(v) for v in self.keypoints.reshape(-1)],
        }
        if self.annotation_id is not None:
            out["annotation_id"] = self.annotation_id
        return out


@dataclass
class AnnotationFile:
    images: list
    records: list
    rejected: list = field(default_factory=list)  # (identifier, reason)

    @property
    def total(self) -> int:
        return len(self.records) + len(self.rejected)


_REQUIRED = ("id", "image_id", "bbox", "keypoints", "area")


def _parse_annotation(raw: dict, index: int, joints: int | None) -> AnnotationRecord:
    ident = f"annotation id={raw.get('id', '?')} (index {index})"
    if not isinstance(raw, dict):
        raise AnnotationError(f"{ident}: expected an object")
    for key in _REQUIRED:
        if key not in raw:
            raise AnnotationError(f"{ident}: missing required field {key!r}")
    flat = np.asarray(raw["keypoints"], dtype=np.float64).reshape(-1)
    if flat.size % 3:
        raise AnnotationError(f"{ident}: {flat.size} keypoint values is not a multiple of 3")
    if joints is not None and flat.size != 3 * joints:
        raise AnnotationError(f"{ident}: {flat.size} keypoint values, expected {3 * joints}")
    kps = flat.reshape(-1, 3)
    if not np.all(np.isfinite(kps)):
        raise AnnotationError(f"{ident}: non-finite keypoint coordinates")
    if not np.all(np.isin(kps[:, 2], (0, 1, 2))):
        raise AnnotationError(f"{ident}: visibility flags must be 0, 1 or 2")
    bbox = tuple(float(v) for v in raw["bbox"])
    if len(bbox) != 4 or bbox[2] <= 0 or bbox[3] <= 0:
        raise AnnotationError(f"{ident}: bbox must be (x, y, w, h) with positive w, h, got {raw['bbox']}")
    head = raw.get("head_size")
    return AnnotationRecord(
        id=int(raw["id"]), image_id=int(raw["image_id"]), bbox=bbox, keypoints=kps,
        area=float(raw["area"]), category_id=int(raw.get("category_id", 1)),
        iscrowd=int(raw.get("iscrowd", 0)), head_size=None if head is None else float(head),
    )


def _joint_count(doc: dict) -> int | None:
    cats = doc.get("categories") or []
    if cats and "keypoints" in cats[0]:
        return len(cats[0]["keypoints"])
    return None


def read_annotation_file(path, joints: int | None = None, strict: bool = True) -> AnnotationFile:
    """Parse a COCO-keypoint-style file.

    The joint count comes from ``joints``, else the first category's keypoint
    names, else the first annotation. With ``strict=False`` malformed records
    are collected in ``rejected`` instead of raising.
    """
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "annotations" not in doc:
        raise AnnotationError(f"{path}: expected an object with an 'annotations' array")
    joints = joints or _joint_count(doc)
    result = AnnotationFile(images=list(doc.get("images", [])), records=[])
    for i, raw in enumerate(doc["annotations"]):
        try:
            rec = _parse_annotation(raw, i, joints)
        except AnnotationError as exc:
            if strict:
                raise AnnotationError(f"{path}: {exc}") from None
            result.rejected.append((raw.get("id", i) if isinstance(raw, dict) else i, str(exc)))
            continue
        if joints is None:
            joints = rec.num_joints
        result.records.append(rec)
    return result


def load_annotations(path, joints: int | None = None) -> list:
    return read_annotation_file(path, joints, strict=True).records


def write_annotations(path, records, images=None, keypoint_names=None) -> None:
    if images is None:
        images = [{"id": i} for i in sorted({r.image_id for r in records})]
    doc = {"images": images, "annotations": [r.to_json() for r in records]}
    if keypoint_names is not None:
        doc["categories"] = [{"id": 1, "name": "person", "keypoints": list(keypoint_names)}]
    Path(path).write_text(json.dumps(doc, indent=1))


def write_predictions(path, predictions) -> None:
    Path(path).write_text(json.dumps([p.to_json() for p in predictions], indent=1))


def read_predictions(path, joints: int | None = None) -> list:
    try:
        doc = json.loads(Path(path).read_text() or "[]")
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, list):
        raise AnnotationError(f"{path}: expected a JSON array of predictions")
    out = []
    for i, raw in enumerate(doc):
        for key in ("image_id", "score", "keypoints"):
            if key not in raw:
                raise AnnotationError(f"{path}: prediction {i} lacks {key!r}")
        flat = np.asarray(raw["keypoints"], dtype=np.float64).reshape(-1)
        if flat.size % 3 or (joints is not None and flat.size != 3 * joints):
            raise AnnotationError(f"{path}: prediction {i} has {flat.size} keypoint values")
        out.append(PredictionRecord(
            image_id=int(raw["image_id"]), score=float(raw["score"]), keypoints=flat.reshape(-1, 3),
            annotation_id=raw.get("annotation_id"), category_id=int(raw.get("category_id", 1))))
    return out


def predictions_from_annotations(records, score: float = 1.0) -> list:
    return [PredictionRecord(r.image_id, score, r.keypoints.copy(), annotation_id=r.id) for r in records]


# ---------------------------------------------------------------------------
# raw image tensors

IMAGE_MAGIC = b"GUPI"
_IMG_TAGS = {0: "<f4", 1: "<f8", 2: "u1"}
_IMG_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


def write_image_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array)
    if arr.dtype not in _IMG_TAG_OF:
        arr = arr.astype(np.float32)
    tag = _IMG_TAG_OF[arr.dtype]
    header = IMAGE_MAGIC + struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IMG_TAGS[tag], copy=False).tobytes())


def read_image_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != IMAGE_MAGIC:
        raise AnnotationError(f"{path}: not a raw image tensor (magic {blob[:4]!r})")
    if len(blob) < 6:
        raise AnnotationError(f"{path}: truncated header")
    tag, rank = struct.unpack("<BB", blob[4:6])
    if tag not in _IMG_TAGS:
        raise AnnotationError(f"{path}: unknown dtype tag {tag}")
    end = 6 + 4 * rank
    if len(blob) < end:
        raise AnnotationError(f"{path}: truncated header")
    shape = struct.unpack(f"<{rank}I", blob[6:end])
    dtype = np.dtype(_IMG_TAGS[tag])
    if len(blob) - end != int(np.prod(shape)) * dtype.itemsize:
        raise AnnotationError(f"{path}: data size does not match extents {shape}")
    return np.frombuffer(blob[end:], dtype=dtype).reshape(shape).copy()


# ---------------------------------------------------------------------------
# top-down crop

PADDING_FACTOR = 1.25


@dataclass(frozen=True)
class CropTransform:
    """Maps original pixel coordinates to crop coordinates: p' = (p - src) * scale + dst."""

    scale: float
    src_center: tuple
    dst_center: tuple

    def apply(self, points) -> np.ndarray:
        pts = np.array(points, dtype=np.float64)
        pts[..., :2] = (pts[..., :2] - np.asarray(self.src_center)) * self.scale + np.asarray(self.dst_center)
        return pts

    def invert(self, points) -> np.ndarray:
        pts = np.array(points, dtype=np.float64)
        pts[..., :2] = (pts[..., :2] - np.asarray(self.dst_center)) / self.scale + np.asarray(self.src_center)
        return pts

    @property
    def translation(self) -> tuple:
        return tuple(np.asarray(self.dst_center) - np.asarray(self.src_center) * self.scale)


def crop_box(box, target=(256, 192), padding: float = PADDING_FACTOR):
    """Expand ``box`` about its centre to the target aspect, then by ``padding``."""
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0 or not np.all(np.isfinite([x, y, w, h])):
        raise ShapeError(f"degenerate box {box}")
    th, tw = target
    aspect = tw / th
    if w > aspect * h:
        h = w / aspect
    else:
        w = h * aspect
    return (x + 0.5 * float(box[2]), y + 0.5 * float(box[3])), w * padding, h * padding


def crop_transform(box, target=(256, 192), padding: float = PADDING_FACTOR) -> CropTransform:
    center, w, _ = crop_box(box, target, padding)
    th, tw = target
    return CropTransform(scale=tw / w, src_center=center, dst_center=((tw - 1) / 2.0, (th - 1) / 2.0))


def _bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    _, h, w = image.shape
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = xs - x0, ys - y0
    top = image[:, y0, x0] * (1 - fx) + image[:, y0, x1] * fx
    bottom = image[:, y1, x0] * (1 - fx) + image[:, y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def crop_to_input(image, box, target=(256, 192), padding: float = PADDING_FACTOR):
    """Resample the padded, aspect-corrected box to ``target``; returns (crop, transform)."""
    image = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"image must be [C, H, W], got {image.shape}")
    tf = crop_transform(box, target, padding)
    th, tw = target
    grid = np.stack(np.meshgrid(np.arange(tw, dtype=np.float64), np.arange(th, dtype=np.float64)), axis=-1)
    src = tf.invert(grid)
    return _bilinear_sample(image, src[..., 0], src[..., 1]), tf


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    joints: int = 4
    image_size: tuple = (64, 64)
    blob_radius: float = 3.0
    jitter: float = 10.0
    samples: int = 512
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)

    def validate(self) -> "SyntheticSpec":
        from .exceptions import ConfigError

        for name in ("joints", "blob_radius", "samples"):
            if getattr(self, name) <= 0:
                raise ConfigError(name, "must be positive")
        if self.jitter < 0 or self.noise < 0:
            raise ConfigError("jitter" if self.jitter < 0 else "noise", "must be non-negative")
        if len(self.image_size) != 2 or min(self.image_size) <= 2 * self.blob_radius:
            raise ConfigError("image_size", f"{self.image_size} too small for blob radius {self.blob_radius}")
        return self


def joint_palette(joints: int) -> np.ndarray:
    """Distinct RGB colours, one per joint."""
    base = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [0, 1, 1], [1, 0, 1],
                     [1, 0.5, 0], [0.5, 0, 1], [0, 1, 0.5], [1, 1, 1]], dtype=np.float64)
    reps = -(-joints // len(base))
    scales = np.repeat(np.linspace(1.0, 0.5, reps), len(base))[:, None]
    return (np.tile(base, (reps, 1)) * scales)[:joints]


def joint_template(joints: int, image_size) -> np.ndarray:
    """Canonical joint positions spread on an ellipse around the image centre."""
    h, w = image_size
    angles = 2 * np.pi * np.arange(joints) / joints
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    return np.stack([cx + 0.3 * w * np.cos(angles), cy + 0.3 * h * np.sin(angles)], axis=1)


@dataclass
class SyntheticSample:
    image: np.ndarray        # [3, H, W]
    keypoints: np.ndarray    # [J, 3]
    annotation: AnnotationRecord


def synthetic_sample(spec: SyntheticSpec, index: int) -> SyntheticSample:
    rng = np.random.default_rng(derive_seed(spec.seed, index))
    h, w = spec.image_size
    r = spec.blob_radius
    template = joint_template(spec.joints, spec.image_size)
    xy = template + rng.uniform(-spec.jitter, spec.jitter, size=template.shape)
    xy[:, 0] = np.clip(xy[:, 0], r, w - 1 - r)
    xy[:, 1] = np.clip(xy[:, 1], r, h - 1 - r)
    image = spec.noise * rng.random((3, h, w))
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    sigma = r / 2.0
    for colour, (px, py) in zip(joint_palette(spec.joints), xy):
        blob = np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2 * sigma ** 2))
        image += colour[:, None, None] * blob[None]
    kps = np.concatenate([xy, np.full((spec.joints, 1), 2.0)], axis=1)
    x0, y0 = xy.min(axis=0) - r
    x1, y1 = xy.max(axis=0) + r
    ann = AnnotationRecord(id=index, image_id=index, bbox=(x0, y0, x1 - x0, y1 - y0),
                           keypoints=kps, area=float((x1 - x0) * (y1 - y0)))
    return SyntheticSample(image, kps, ann)


def generate_synthetic(spec: SyntheticSpec, start: int = 0) -> list:
    """Samples ``start .. start + spec.samples - 1``; each depends only on (seed, index)."""
    spec.validate()
    return [synthetic_sample(spec, i) for i in range(start, start + spec.samples)]


def stack_samples(samples) -> tuple:
    return (np.stack([s.image for s in samples]), np.stack([s.keypoints for s in samples]))
