"""Detector abstraction and the detection manager.

Three adapters are provided: predictions read from a COCO results file, a
rule-based colour model for fire, and a noise-injecting synthetic detector
that replays ground truth (used to exercise the rest of the pipeline).
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .annotations import AnnotatedDataset, Annotation, ImageRecord, parse_coco_results, read_coco
from .geometry import BoundingBox
from .imaging import check_raster, load_image

log = logging.getLogger(__name__)

DETECTOR_KINDS = ("file_backed", "color_rule", "synthetic")


@dataclass(frozen=True)
class ColorRuleParams:
    r_threshold: int = 190
    s_threshold: float = 0.2
    min_area: int = 30
    category_id: int = 0


@dataclass(frozen=True)
class NoiseSpec:
    """Corruptions applied by :func:`synthetic_detect`.

    Attributes:
        jitter_sigma: std-dev (pixels) of Gaussian noise on each box corner.
        miss_prob: probability a ground-truth box is dropped.
        fp_rate: mean number (Poisson) of spurious boxes per image.
        confusion_prob: probability a kept box gets a different class.
        score_sigma: spread of confidences below 1.0 for kept boxes.
    """

    jitter_sigma: float = 0.0
    miss_prob: float = 0.0
    fp_rate: float = 0.0
    confusion_prob: float = 0.0
    score_sigma: float = 0.0

    def __post_init__(self):
        for name in ("miss_prob", "confusion_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        for name in ("jitter_sigma", "fp_rate", "score_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class DetectorSpec:
    name: str
    kind: str
    params: Mapping = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.kind not in DETECTOR_KINDS:
            raise ValueError(f"unknown detector kind {self.kind!r}; expected one of {DETECTOR_KINDS}")


@dataclass(frozen=True)
class DetectionFailure:
    image_id: int
    detector: str
    error: str


@dataclass
class ManagerResult:
    detections: list[Annotation]
    failures: list[DetectionFailure]


class Detector(ABC):
    """Produces scored boxes for one image at a time. Stateless after construction."""

    def __init__(self, name: str):
        self.name = name

    @abstractmethod
    def detect(self, image: ImageRecord) -> list[Annotation]:
        ...


# --- file-backed predictions ------------------------------------------------


def load_file_predictions(path: str | Path, name: str) -> dict[int, list[Annotation]]:
    """Read a COCO results file into per-image detection lists tagged ``source=name``."""
    out: dict[int, list[Annotation]] = {}
    for det in parse_coco_results(Path(path).read_bytes(), source=name):
        out.setdefault(det.image_id, []).append(det)
    return out


class FilePredictionDetector(Detector):
    def __init__(self, name: str, predictions: Mapping[int, list[Annotation]]):
        super().__init__(name)
        self._predictions = predictions

    @classmethod
    def from_file(cls, name: str, path: str | Path) -> "FilePredictionDetector":
        return cls(name, load_file_predictions(path, name))

    def detect(self, image: ImageRecord) -> list[Annotation]:
        return list(self._predictions.get(image.id, []))


# --- rule-based fire colour model -------------------------------------------


def fire_mask(rgb: np.ndarray, params: ColorRuleParams = ColorRuleParams()) -> np.ndarray:
    """Boolean mask of pixels with R >= thr, R >= G >= B and HSV saturation >= s_thr."""
    rgb = check_raster(rgb)
    if rgb.shape[2] != 3:
        raise ValueError(f"colour rule needs an RGB raster, got {rgb.shape[2]} channels")
    r, g, b = (rgb[..., i].astype(np.int32) for i in range(3))
    # with R the channel maximum and B the minimum, saturation is (R - B) / R
    saturated = (r - b) >= params.s_threshold * r
    return (r >= params.r_threshold) & (r >= g) & (g >= b) & saturated & (r > 0)


def color_rule_fire_detect(
    rgb: np.ndarray, params: ColorRuleParams = ColorRuleParams(), image_id: int = 0, source: str = "color_rule"
) -> list[Annotation]:
    """Group fire-coloured pixels into 8-connected blobs and box the large ones.

    Confidence is the fraction of fire pixels inside the blob's box.
    """
    mask = fire_mask(rgb, params)
    labels, _ = ndimage.label(mask, structure=np.ones((3, 3), dtype=bool))
    dets = []
    for idx, slc in enumerate(ndimage.find_objects(labels), start=1):
        if slc is None:
            continue
        ys, xs = slc
        if int((labels[slc] == idx).sum()) < params.min_area:
            continue
        box = BoundingBox(xs.start, ys.start, xs.stop, ys.stop)
        fill = float(mask[slc].sum()) / box.area
        dets.append(Annotation(image_id, box, params.category_id, score=fill, source=source))
    return dets


class ColorRuleFireDetector(Detector):
    def __init__(self, name: str, params: ColorRuleParams = ColorRuleParams(), image_root: str | Path = "."):
        super().__init__(name)
        self.params = params
        self.image_root = Path(image_root)

    def detect(self, image: ImageRecord) -> list[Annotation]:
        rgb = load_image(self.image_root / image.file_name)[..., :3]
        return color_rule_fire_detect(rgb, self.params, image.id, self.name)


# --- synthetic --------------------------------------------------------------


def _jitter(box: BoundingBox, sigma: float, rng: np.random.Generator, bounds: BoundingBox | None) -> BoundingBox:
    x0, y0, x1, y1 = np.asarray(box.as_tuple()) + rng.normal(0.0, sigma, 4)
    x0, x1 = sorted((x0, x1))
    y0, y1 = sorted((y0, y1))
    if bounds is not None:
        x0, x1 = np.clip([x0, x1], bounds.x_min, bounds.x_max)
        y0, y1 = np.clip([y0, y1], bounds.y_min, bounds.y_max)
    return BoundingBox(float(x0), float(y0), float(x1), float(y1))


def synthetic_detect(gt: AnnotatedDataset, noise: NoiseSpec, seed: int, source: str = "synthetic") -> list[Annotation]:
    """Replay ground truth with controlled corruption.

    Each image draws from its own generator seeded by ``(seed, image_id)``,
    so results do not depend on processing order. With a default
    :class:`NoiseSpec` the output equals the ground truth at confidence 1.0.
    """
    class_ids = sorted(c.id for c in gt.classes)
    per_image = gt.by_image()
    out: list[Annotation] = []
    for im in sorted(gt.images, key=lambda r: r.id):
        rng = np.random.default_rng([seed, im.id])
        bounds = im.bounds
        for ann in per_image[im.id]:
            if rng.random() < noise.miss_prob:
                continue
            box = _jitter(ann.box, noise.jitter_sigma, rng, bounds) if noise.jitter_sigma else ann.box
            cls = ann.category_id
            if len(class_ids) > 1 and rng.random() < noise.confusion_prob:
                cls = int(rng.choice([c for c in class_ids if c != cls]))
            score = 1.0 - min(abs(rng.normal(0.0, noise.score_sigma)), 0.95) if noise.score_sigma else 1.0
            out.append(Annotation(im.id, box, cls, score=float(score), source=source))
        if noise.fp_rate and bounds is not None and class_ids:
            for _ in range(rng.poisson(noise.fp_rate)):
                w = rng.uniform(0.05, 0.25) * bounds.width
                h = rng.uniform(0.05, 0.25) * bounds.height
                x = rng.uniform(0, bounds.width - w)
                y = rng.uniform(0, bounds.height - h)
                out.append(
                    Annotation(
                        im.id,
                        BoundingBox(x, y, x + w, y + h),
                        int(rng.choice(class_ids)),
                        score=float(rng.uniform(0.05, 0.95)),
                        source=source,
                    )
                )
    return out


class SyntheticDetector(Detector):
    def __init__(self, name: str, gt: AnnotatedDataset, noise: NoiseSpec = NoiseSpec(), seed: int = 0):
        super().__init__(name)
        self._by_image: dict[int, list[Annotation]] = {}
        for det in synthetic_detect(gt, noise, seed, source=name):
            self._by_image.setdefault(det.image_id, []).append(det)

    def detect(self, image: ImageRecord) -> list[Annotation]:
        return list(self._by_image.get(image.id, []))


# --- construction + manager -------------------------------------------------


def _dataclass_from(cls, params: Mapping):
    known = {f.name for f in fields(cls)}
    unknown = set(params) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} parameters: {sorted(unknown)}")
    return cls(**params)


def build_detector(spec: DetectorSpec, image_root: str | Path = ".") -> Detector:
    """Instantiate the adapter described by ``spec``.

    ``file_backed`` needs ``params.path``; ``synthetic`` needs
    ``params.ground_truth`` (a COCO path or an :class:`AnnotatedDataset`),
    plus optional ``seed`` and ``noise``; ``color_rule`` takes
    :class:`ColorRuleParams` fields.
    """
    p = dict(spec.params)
    if spec.kind == "file_backed":
        return FilePredictionDetector.from_file(spec.name, p["path"])
    if spec.kind == "color_rule":
        return ColorRuleFireDetector(spec.name, _dataclass_from(ColorRuleParams, p), image_root)
    gt = p.pop("ground_truth")
    if not isinstance(gt, AnnotatedDataset):
        gt = read_coco(gt)
    noise = _dataclass_from(NoiseSpec, p.pop("noise", {}))
    seed = int(p.pop("seed", 0))
    if p:
        raise ValueError(f"unknown synthetic detector parameters: {sorted(p)}")
    return SyntheticDetector(spec.name, gt, noise, seed)


def _detection_order(d: Annotation):
    return (-(d.score or 0.0), d.box.as_tuple(), d.category_id)


def run_detection_manager(
    images: Sequence[ImageRecord],
    detectors: Sequence[Detector],
    workers: int = 1,
    on_progress: Callable[[int, str], None] | None = None,
) -> ManagerResult:
    """Run every detector on every image.

    Results are ordered by image id, detector name, then descending
    confidence regardless of ``workers``. A detector raising on one image is
    recorded in ``failures`` and does not stop the others.
    """
    names = [d.name for d in detectors]
    if len(set(names)) != len(names):
        raise ValueError(f"detector names must be unique, got {names}")
    ordered_images = sorted(images, key=lambda r: r.id)
    ordered_detectors = sorted(detectors, key=lambda d: d.name)
    jobs = [(im, det) for im in ordered_images for det in ordered_detectors]

    def run(job):
        im, det = job
        try:
            found = det.detect(im)
        except Exception as exc:  # isolate per-detector failures
            log.warning("detector %s failed on image %s: %s", det.name, im.id, exc)
            return None, DetectionFailure(im.id, det.name, f"{type(exc).__name__}: {exc}")
        if on_progress is not None:
            on_progress(im.id, det.name)
        tagged = [d if d.source == det.name else replace(d, source=det.name) for d in found]
        return sorted(tagged, key=_detection_order), None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(job) for job in jobs]

    detections, failures = [], []
    for found, failure in results:
        if failure is not None:
            failures.append(failure)
        else:
            detections.extend(found)
    return ManagerResult(detections, failures)

