"""Annotation data model, COCO parsing/serialization, YOLO export and splits.

Ground truth and predictions share :class:`Annotation`; a prediction is an
annotation whose ``score`` is set.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import BoundingBox

log = logging.getLogger(__name__)


class CocoFormatError(ValueError):
    """Malformed COCO document. Carries line/column when JSON decoding failed."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)
        self.line = line
        self.column = column


class ReferentialIntegrityError(ValueError):
    """An annotation points at an image or category that does not exist."""

    def __init__(self, message: str, annotation_id=None):
        super().__init__(message)
        self.annotation_id = annotation_id


class MissingDimensionError(ValueError):
    pass


class TooFewImagesError(ValueError):
    pass


@dataclass(frozen=True)
class ClassLabel:
    id: int
    name: str

    def __post_init__(self):
        if not self.name:
            raise ValueError(f"class {self.id} has an empty name")


@dataclass(frozen=True)
class FlightMeta:
    altitude_m: float
    focal_length_mm: float
    sensor_width_mm: float

    def __post_init__(self):
        for name in ("altitude_m", "focal_length_mm", "sensor_width_mm"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive and finite, got {v}")

    def to_json(self) -> dict:
        return {
            "altitude_m": self.altitude_m,
            "focal_length_mm": self.focal_length_mm,
            "sensor_width_mm": self.sensor_width_mm,
        }


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int | None = None
    height: int | None = None
    flight_meta: FlightMeta | None = None
    extra: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        for name in ("width", "height"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"image {self.id}: {name} must be positive, got {v}")

    @property
    def bounds(self) -> BoundingBox | None:
        if self.width is None or self.height is None:
            return None
        return BoundingBox(0, 0, self.width, self.height)


@dataclass(frozen=True)
class Annotation:
    """One box on one image.

    ``score`` is ``None`` for ground truth and a value in [0, 1] for
    predictions. ``source`` names the detector (or filter) that produced it.
    """

    image_id: int
    box: BoundingBox
    category_id: int
    score: float | None = None
    source: str | None = None
    id: int | None = None
    extra: dict = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be within [0, 1], got {self.score}")

    @property
    def is_prediction(self) -> bool:
        return self.score is not None


# The detector-facing name for a scored annotation.
Detection = Annotation


@dataclass
class AnnotatedDataset:
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    classes: list[ClassLabel] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        image_ids = [im.id for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise ValueError("duplicate image ids")
        class_ids = [c.id for c in self.classes]
        if len(set(class_ids)) != len(class_ids):
            raise ValueError("duplicate class ids")
        known_images, known_classes = set(image_ids), set(class_ids)
        for ann in self.annotations:
            if ann.image_id not in known_images:
                raise ReferentialIntegrityError(
                    f"annotation {ann.id} references missing image id {ann.image_id}", ann.id
                )
            if ann.category_id not in known_classes:
                raise ReferentialIntegrityError(
                    f"annotation {ann.id} references missing category id {ann.category_id}", ann.id
                )

    def image_index(self) -> dict[int, ImageRecord]:
        return {im.id: im for im in self.images}

    def class_names(self) -> dict[int, str]:
        return {c.id: c.name for c in self.classes}

    def by_image(self) -> dict[int, list[Annotation]]:
        out: dict[int, list[Annotation]] = {im.id: [] for im in self.images}
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def renumbered(self) -> "AnnotatedDataset":
        """Copy with annotation ids reassigned 1..N in current order."""
        anns = [replace(a, id=i) for i, a in enumerate(self.annotations, start=1)]
        return AnnotatedDataset(list(self.images), anns, list(self.classes), dict(self.extra))


# --- COCO -------------------------------------------------------------------

_IMAGE_KEYS = {"id", "file_name", "width", "height", "flight_meta"}
_ANN_KEYS = {"id", "image_id", "category_id", "bbox", "score", "source", "area", "iscrowd"}
_CAT_KEYS = {"id", "name"}


def _load_json(text: bytes | str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CocoFormatError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from exc


def _bbox(raw, where: str) -> BoundingBox:
    if not isinstance(raw, (list, tuple)) or len(raw) != 4:
        raise CocoFormatError(f"{where}: bbox must be a list of four numbers")
    try:
        x, y, w, h = (float(v) for v in raw)
        return BoundingBox.from_xywh(x, y, w, h)
    except (TypeError, ValueError) as exc:
        raise CocoFormatError(f"{where}: invalid bbox {raw!r}: {exc}") from exc


def _require(entry: Mapping, key: str, where: str):
    if key not in entry:
        raise CocoFormatError(f"{where}: missing required key {key!r}")
    return entry[key]


def _parse_annotation(entry: Mapping, where: str) -> Annotation:
    score = entry.get("score")
    return Annotation(
        image_id=int(_require(entry, "image_id", where)),
        box=_bbox(_require(entry, "bbox", where), where),
        category_id=int(_require(entry, "category_id", where)),
        score=None if score is None else float(score),
        source=entry.get("source"),
        id=None if entry.get("id") is None else int(entry["id"]),
        extra={k: v for k, v in entry.items() if k not in _ANN_KEYS},
    )


def parse_coco(text: bytes | str) -> AnnotatedDataset:
    """Load a COCO annotation document.

    Unknown keys on images and annotations are kept in ``extra``; the
    derived ``area``/``iscrowd`` fields are dropped and regenerated on
    output.

    Raises:
        CocoFormatError: malformed JSON or missing required keys.
        ReferentialIntegrityError: an annotation references an unknown
            image or category.
    """
    doc = _load_json(text)
    if not isinstance(doc, dict):
        raise CocoFormatError("top level must be an object with images/annotations/categories")
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key, []), list):
            raise CocoFormatError(f"{key!r} must be an array")

    classes = [
        ClassLabel(int(_require(c, "id", "category")), str(_require(c, "name", "category")))
        for c in doc.get("categories", [])
    ]
    images = []
    for entry in doc.get("images", []):
        where = f"image {entry.get('id')}"
        meta = entry.get("flight_meta")
        images.append(
            ImageRecord(
                id=int(_require(entry, "id", where)),
                file_name=str(_require(entry, "file_name", where)),
                width=entry.get("width"),
                height=entry.get("height"),
                flight_meta=FlightMeta(**meta) if meta else None,
                extra={k: v for k, v in entry.items() if k not in _IMAGE_KEYS},
            )
        )
    annotations = [
        _parse_annotation(entry, f"annotation {entry.get('id')}") for entry in doc.get("annotations", [])
    ]
    dropped = sorted(set().union(*(set(c) - _CAT_KEYS for c in doc.get("categories", []))))
    if dropped:
        log.warning("dropping unsupported category fields: %s", ", ".join(dropped))
    extra = {k: v for k, v in doc.items() if k not in ("images", "annotations", "categories")}
    return AnnotatedDataset(images, annotations, classes, extra)


def _num(v: float):
    # keep integral coordinates as ints so documents stay compact and stable
    return int(v) if float(v).is_integer() else float(v)


def annotation_to_coco(ann: Annotation, ann_id: int | None = None, include_score: bool = True) -> dict:
    out = {
        "id": ann.id if ann_id is None else ann_id,
        "image_id": ann.image_id,
        "category_id": ann.category_id,
        "bbox": [_num(v) for v in ann.box.to_xywh()],
        "area": _num(ann.box.area),
        "iscrowd": 0,
    }
    if include_score and ann.score is not None:
        out["score"] = ann.score
    if ann.source is not None:
        out["source"] = ann.source
    out.update(ann.extra)
    return out


def dataset_to_dict(ds: AnnotatedDataset, include_scores: bool = True) -> dict:
    images = []
    for im in sorted(ds.images, key=lambda r: r.id):
        entry = {"id": im.id, "file_name": im.file_name}
        if im.width is not None:
            entry["width"] = im.width
        if im.height is not None:
            entry["height"] = im.height
        if im.flight_meta is not None:
            entry["flight_meta"] = im.flight_meta.to_json()
        entry.update(im.extra)
        images.append(entry)

    # annotations without ids are numbered after the highest existing id
    next_id = max((a.id for a in ds.annotations if a.id is not None), default=0) + 1
    numbered = []
    for ann in ds.annotations:
        if ann.id is None:
            ann = replace(ann, id=next_id)
            next_id += 1
        numbered.append(ann)
    numbered.sort(key=lambda a: a.id)
    return {
        **ds.extra,
        "images": images,
        "annotations": [annotation_to_coco(a, include_score=include_scores) for a in numbered],
        "categories": [{"id": c.id, "name": c.name} for c in sorted(ds.classes, key=lambda c: c.id)],
    }


def serialize_coco(ds: AnnotatedDataset, include_scores: bool = True) -> bytes:
    """Deterministic COCO document (images, annotations, categories sorted by id)."""
    return (json.dumps(dataset_to_dict(ds, include_scores), indent=2, sort_keys=False) + "\n").encode()


def read_coco(path: str | Path) -> AnnotatedDataset:
    return parse_coco(Path(path).read_bytes())


def write_coco(ds: AnnotatedDataset, path: str | Path, include_scores: bool = True) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_coco(ds, include_scores))


def parse_coco_results(text: bytes | str, source: str | None = None) -> list[Annotation]:
    """Parse the flat COCO results array ``[{image_id, category_id, bbox, score}]``."""
    doc = _load_json(text)
    if isinstance(doc, dict) and "annotations" in doc:
        rows = doc["annotations"]
    elif isinstance(doc, list):
        rows = doc
    else:
        raise CocoFormatError("results document must be an array of detections")
    out = []
    for i, row in enumerate(rows):
        where = f"result {i}"
        if "score" not in row:
            raise CocoFormatError(f"{where}: missing required key 'score'")
        ann = _parse_annotation(row, where)
        out.append(replace(ann, source=source or ann.source, id=ann.id if ann.id is not None else i + 1))
    return out


def serialize_coco_results(dets: Iterable[Annotation]) -> bytes:
    rows = []
    for d in dets:
        row = {
            "image_id": d.image_id,
            "category_id": d.category_id,
            "bbox": [_num(v) for v in d.box.to_xywh()],
            "score": d.score,
        }
        if d.source is not None:
            row["source"] = d.source
        rows.append(row)
    return (json.dumps(rows, indent=2) + "\n").encode()


# --- YOLO -------------------------------------------------------------------


def _yolo_line(ann: Annotation, im: ImageRecord) -> str:
    if not im.width or not im.height:
        raise MissingDimensionError(f"image {im.id} ({im.file_name}) has no known dimensions")
    b = ann.box
    vals = (
        (b.x_min + b.x_max) / 2 / im.width,
        (b.y_min + b.y_max) / 2 / im.height,
        b.width / im.width,
        b.height / im.height,
    )
    vals = [min(max(v, 0.0), 1.0) for v in vals]
    return f"{ann.category_id} " + " ".join(f"{v:.6f}" for v in vals)


def convert_labels(ds: AnnotatedDataset, fmt: str) -> dict[str, str]:
    """Render a dataset as a set of label files, keyed by relative file name.

    ``coco`` gives a single ``annotations.json``; ``yolo`` gives one
    ``<stem>.txt`` per image with normalized ``class cx cy w h`` lines.
    """
    if fmt == "coco":
        return {"annotations.json": serialize_coco(ds).decode()}
    if fmt != "yolo":
        raise ValueError(f"unknown label format {fmt!r}")
    per_image = ds.by_image()
    files = {}
    for im in sorted(ds.images, key=lambda r: r.id):
        lines = [_yolo_line(a, im) for a in per_image[im.id]]
        files[Path(im.file_name).stem + ".txt"] = "".join(line + "\n" for line in lines)
    return files


def parse_yolo(files: Mapping[str, str], images: Sequence[ImageRecord], classes: Sequence[ClassLabel]) -> AnnotatedDataset:
    """Inverse of the YOLO export; image dimensions come from ``images``."""
    anns = []
    for im in images:
        text = files.get(Path(im.file_name).stem + ".txt", "")
        if text.strip() and (not im.width or not im.height):
            raise MissingDimensionError(f"image {im.id} ({im.file_name}) has no known dimensions")
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 5:
                raise CocoFormatError(f"{im.file_name}: YOLO line {lineno} needs 5 fields")
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
            cx, w = cx * im.width, w * im.width
            cy, h = cy * im.height, h * im.height
            anns.append(Annotation(im.id, BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), cls))
    return AnnotatedDataset(list(images), anns, list(classes)).renumbered()


def write_label_files(files: Mapping[str, str], out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out_dir / name).write_text(text)


# --- splitting --------------------------------------------------------------


def train_count(n_images: int, train_fraction: float) -> int:
    """``round(fraction * n)`` with halves going to the training side, kept in [1, n-1]."""
    n_train = math.floor(train_fraction * n_images + 0.5)
    return min(max(n_train, 1), n_images - 1)


def split_dataset(ds: AnnotatedDataset, train_fraction: float, seed: int) -> tuple[AnnotatedDataset, AnnotatedDataset]:
    """Image-level random split; deterministic for a fixed seed."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds.images)
    if n < 2:
        raise TooFewImagesError(f"need at least 2 images to split, got {n}")
    ordered = sorted(ds.images, key=lambda r: r.id)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = train_count(n, train_fraction)
    train_ids = {ordered[i].id for i in perm[:n_train]}

    def part(keep: bool) -> AnnotatedDataset:
        return AnnotatedDataset(
            [im for im in ordered if (im.id in train_ids) == keep],
            [a for a in ds.annotations if (a.image_id in train_ids) == keep],
            list(ds.classes),
            dict(ds.extra),
        )

    return part(True), part(False)
