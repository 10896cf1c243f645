"""Data augmentation: FP mosaics, metric object scaling, blending and object pasting."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .annotations import AnnotatedDataset, Annotation, ClassLabel, FlightMeta, ImageRecord
from .geometry import BoundingBox, iou
from .imaging import MaskedCrop, OutOfBoundsError, check_raster, composite, load_image, resize

log = logging.getLogger(__name__)

MOSAIC_VARIANTS = {"square": 1.0, "double_width": 2.0, "double_height": 0.5}


class MissingMetadataError(ValueError):
    pass


class ObjectTooSmallError(ValueError):
    """The object would be narrower than the minimum pixel width at this GSD."""


class EmptyClassError(ValueError):
    pass


class NoOppositeClassError(ValueError):
    pass


@dataclass(frozen=True)
class PasteObject:
    crop: MaskedCrop
    class_id: int
    max_width_m: float
    name: str = ""

    def __post_init__(self):
        if not self.max_width_m > 0:
            raise ValueError(f"max_width_m must be positive, got {self.max_width_m}")
        if not (self.crop.alpha > 0).any():
            raise ValueError("paste object has no opaque pixels")


@dataclass(frozen=True)
class FpCrop:
    raster: np.ndarray
    predicted_class: int
    image_id: int


# --- scaling ----------------------------------------------------------------


def compute_gsd(meta: FlightMeta | None, image_width_px: int) -> float:
    """Ground sampling distance in metres per pixel."""
    if meta is None:
        raise MissingMetadataError("no flight metadata (altitude, focal length, sensor width)")
    if image_width_px <= 0:
        raise ValueError("image width must be positive")
    return meta.altitude_m * meta.sensor_width_mm / (meta.focal_length_mm * image_width_px)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _coverage(mask: np.ndarray, new_len: int, axis: int) -> np.ndarray:
    # output cell i covers source [i*n/new_len, (i+1)*n/new_len); cells partition the source
    starts = (np.arange(new_len) * mask.shape[axis]) // new_len
    return np.logical_or.reduceat(mask, starts, axis=axis)


def resize_masked(crop: MaskedCrop, new_w: int, new_h: int) -> MaskedCrop:
    """Resize a tight crop so its opaque extent spans exactly ``new_w x new_h``.

    Colour and alpha are resampled bilinearly; a pixel stays non-transparent
    iff its source footprint touches an opaque pixel, which keeps the first
    and last row/column opaque.
    """
    tight = crop.tight()
    rgba = resize(tight.raster, new_w, new_h)
    cov = _coverage(_coverage(tight.alpha > 0, new_h, 0), new_w, 1)
    rgba[..., 3] = np.where(cov, np.maximum(rgba[..., 3], 1), 0)
    return MaskedCrop(rgba, BoundingBox(0, 0, new_w, new_h))


def scale_object(obj: PasteObject, gsd: float, min_width_px: int = 2) -> MaskedCrop:
    """Resize ``obj`` so its opaque width is ``round(max_width_m / gsd)`` pixels."""
    if not gsd > 0:
        raise ValueError(f"gsd must be positive, got {gsd}")
    target_w = _round_half_up(obj.max_width_m / gsd)
    if target_w < min_width_px:
        raise ObjectTooSmallError(f"{obj.name or 'object'} would be {target_w}px wide at {gsd:.4f} m/px")
    tight = obj.crop.tight()
    target_h = max(1, _round_half_up(tight.height * target_w / tight.width))
    if (target_w, target_h) == (tight.width, tight.height):
        return tight
    return resize_masked(tight, target_w, target_h)


def fit_within(crop: MaskedCrop, max_w: int, max_h: int) -> MaskedCrop:
    """Shrink a crop (aspect kept) until it fits ``max_w x max_h``; never enlarges."""
    tight = crop.tight()
    s = min(1.0, max_w / tight.width, max_h / tight.height)
    if s >= 1.0:
        return tight
    return resize_masked(tight, max(1, int(tight.width * s)), max(1, int(tight.height * s)))


# --- blending ---------------------------------------------------------------


def _ring_pixels(base: np.ndarray, x: int, y: int, w: int, h: int, fraction: float) -> np.ndarray:
    H, W = base.shape[:2]
    rw, rh = max(1, math.ceil(fraction * w)), max(1, math.ceil(fraction * h))
    x0, y0, x1, y1 = max(0, x - rw), max(0, y - rh), min(W, x + w + rw), min(H, y + h + rh)
    region = base[y0:y1, x0:x1, :3]
    inside = np.zeros(region.shape[:2], dtype=bool)
    inside[y - y0 : y - y0 + h, x - x0 : x - x0 + w] = True
    ring = region[~inside]
    return ring if len(ring) else region.reshape(-1, 3)


def blend(
    base: np.ndarray,
    crop: MaskedCrop,
    x: int,
    y: int,
    strength: float = 0.5,
    ring_fraction: float = 0.25,
    feather_px: float = 2.0,
) -> np.ndarray:
    """Paste ``crop`` with colour statistics pulled toward its surroundings.

    Per channel, the object's mean and standard deviation move toward those
    of a background ring (``ring_fraction`` of the crop size wide) by
    ``strength``; the mask edge is feathered over ``feather_px`` pixels in
    proportion to ``strength``. ``strength=0`` is a plain composite.
    Feathering never makes an opaque pixel fully transparent, so the opaque
    extent is unchanged.
    """
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must be within [0, 1], got {strength}")
    base = check_raster(base)
    h, w = crop.height, crop.width
    if x < 0 or y < 0 or x + w > base.shape[1] or y + h > base.shape[0]:
        raise OutOfBoundsError(f"{w}x{h} object at ({x}, {y}) leaves the {base.shape[1]}x{base.shape[0]} image")
    if strength == 0:
        return composite(base, crop, x, y)

    mask = crop.alpha > 0
    rgb = crop.raster[..., :3].astype(np.float64)
    obj_px = rgb[mask]
    mu_o, sd_o = obj_px.mean(axis=0), obj_px.std(axis=0)
    ring = _ring_pixels(base, x, y, w, h, ring_fraction).astype(np.float64)
    mu_b, sd_b = ring.mean(axis=0), ring.std(axis=0)
    mu_t = mu_o + strength * (mu_b - mu_o)
    sd_t = sd_o + strength * (sd_b - sd_o)
    gain = np.divide(sd_t, sd_o, out=np.ones_like(sd_o), where=sd_o > 0)
    shifted = np.clip(np.rint((rgb - mu_o) * gain + mu_t), 0, 255).astype(np.uint8)

    dist = ndimage.distance_transform_edt(np.pad(mask, 1))[1:-1, 1:-1]
    edge = np.clip(dist / feather_px, 0.0, 1.0) if feather_px > 0 else np.ones_like(dist)
    alpha = crop.alpha.astype(np.float64) * (1.0 - strength * (1.0 - edge))
    alpha = np.where(mask, np.maximum(np.rint(alpha), 1), 0).astype(np.uint8)
    return composite(base, MaskedCrop(np.dstack([shifted, alpha]), crop.tight_box), x, y)


# --- mosaics ----------------------------------------------------------------


@dataclass(frozen=True)
class MosaicSpec:
    """Mosaic geometry.

    ``variant`` fixes the cell aspect (square 1:1, ``double_width`` 2:1,
    ``double_height`` 1:2); the grid is chosen to hold about
    ``cells_per_mosaic`` cells in a roughly ``target_side`` square image.
    """

    variant: str = "square"
    target_side: int = 900
    seed: int = 0
    cells_per_mosaic: int = 9
    extra_iterations: int = 9

    def __post_init__(self):
        if self.variant not in MOSAIC_VARIANTS:
            raise ValueError(f"unknown mosaic variant {self.variant!r}")
        if self.target_side <= 0 or self.cells_per_mosaic <= 0 or self.extra_iterations < 0:
            raise ValueError("target_side and cells_per_mosaic must be positive")

    def grid(self) -> tuple[int, int, int, int]:
        """``(cols, rows, cell_w, cell_h)``."""
        aspect = MOSAIC_VARIANTS[self.variant]
        cols = max(1, _round_half_up(math.sqrt(self.cells_per_mosaic / aspect)))
        rows = max(1, _round_half_up(aspect * cols))
        cell_h = max(1, _round_half_up(self.target_side / rows))
        cell_w = max(1, _round_half_up(cell_h * aspect))
        return cols, rows, cell_w, cell_h


@dataclass
class Mosaic:
    raster: np.ndarray
    class_id: int
    members: list[int]  # indices into the FP list, row-major


def mosaic_iterations(n_fp: int, cells: int, extra: int = 9) -> int:
    return math.ceil(n_fp / cells) + extra


def build_mosaics(fps: Sequence[FpCrop], spec: MosaicSpec = MosaicSpec(), classes: Sequence[int] | None = None) -> list[Mosaic]:
    """Tile false-positive crops into mosaics, one class at a time.

    Each class's crops are shuffled once (seeded by ``spec.seed`` and the
    class id) and laid out row-major, cycling through the pool, for
    ``ceil(n / cells) + extra_iterations`` mosaics.
    """
    by_class: dict[int, list[int]] = {}
    for i, fp in enumerate(fps):
        by_class.setdefault(fp.predicted_class, []).append(i)
    wanted = sorted(by_class) if classes is None else list(classes)
    if not wanted:
        raise EmptyClassError("no false positives to assemble")
    cols, rows, cell_w, cell_h = spec.grid()
    cells = cols * rows
    out = []
    for cls in wanted:
        pool = by_class.get(cls)
        if not pool:
            raise EmptyClassError(f"class {cls} has no false positives")
        order = [pool[i] for i in np.random.default_rng([spec.seed, cls]).permutation(len(pool))]
        resized: dict[int, np.ndarray] = {}
        for it in range(mosaic_iterations(len(pool), cells, spec.extra_iterations)):
            canvas = np.zeros((rows * cell_h, cols * cell_w, 3), dtype=np.uint8)
            members = []
            for k in range(cells):
                idx = order[(it * cells + k) % len(order)]
                if idx not in resized:
                    resized[idx] = resize(check_raster(fps[idx].raster)[..., :3], cell_w, cell_h)
                r, c = divmod(k, cols)
                canvas[r * cell_h : (r + 1) * cell_h, c * cell_w : (c + 1) * cell_w] = resized[idx]
                members.append(idx)
            out.append(Mosaic(canvas, cls, members))
    return out


def insert_opposite_class_object(
    mosaic: np.ndarray, mosaic_class: int, objects: Sequence[PasteObject], seed: int, image_id: int = 0
) -> tuple[np.ndarray, Annotation]:
    """Paste one random object of a different class at a random position.

    Objects larger than the mosaic are shrunk to fit. The returned
    annotation is the pasted object's opaque extent.
    """
    candidates = [o for o in objects if o.class_id != mosaic_class]
    if not candidates:
        raise NoOppositeClassError(f"no objects of a class other than {mosaic_class}")
    mosaic = check_raster(mosaic)
    rng = np.random.default_rng(seed)
    obj = candidates[int(rng.integers(len(candidates)))]
    H, W = mosaic.shape[:2]
    crop = fit_within(obj.crop, W, H)
    x = int(rng.integers(0, W - crop.width + 1))
    y = int(rng.integers(0, H - crop.height + 1))
    out = composite(mosaic, crop, x, y)
    return out, Annotation(image_id, crop.tight_box.translate(x, y), obj.class_id, source=obj.name or None)


# --- pasting ----------------------------------------------------------------


@dataclass(frozen=True)
class PasteConfig:
    """Distributor settings.

    Attributes:
        objects_per_image: inclusive ``(low, high)`` range of objects per image.
        class_mix: class id -> relative weight.
        margin: minimum distance (px) between a pasted object and the border.
        seed: global seed; each image derives its own stream from it.
        blend_strength: passed to :func:`blend`.
        max_overlap_iou: placements exceeding this IoU with earlier ones are retried.
        max_attempts: placement retries before the object is skipped.
    """

    objects_per_image: tuple[int, int] = (1, 5)
    class_mix: Mapping[int, float] = field(default_factory=dict, hash=False)
    margin: int = 0
    seed: int = 0
    blend_strength: float = 0.5
    max_overlap_iou: float = 0.3
    max_attempts: int = 50

    def __post_init__(self):
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"objects_per_image range {self.objects_per_image} is empty")
        weights = list(self.class_mix.values())
        if any(w < 0 for w in weights) or (weights and sum(weights) <= 0):
            raise ValueError("class_mix weights must be non-negative and not all zero")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")


@dataclass(frozen=True)
class Placement:
    image_id: int
    category_id: int
    x: int
    y: int
    alpha: np.ndarray  # alpha channel of the pasted crop

    @property
    def opaque_box(self) -> BoundingBox:
        ys, xs = np.nonzero(self.alpha)
        return BoundingBox(self.x + int(xs.min()), self.y + int(ys.min()), self.x + int(xs.max()) + 1, self.y + int(ys.max()) + 1)


@dataclass
class PasteRun:
    dataset: AnnotatedDataset
    rasters: dict[int, np.ndarray]
    placements: list[Placement]
    warnings: list[str]


def _paste_one(
    image: ImageRecord,
    raster: np.ndarray,
    pools: Mapping[int, list[PasteObject]],
    cfg: PasteConfig,
) -> tuple[np.ndarray, list[Annotation], list[Placement], list[str]]:
    rng = np.random.default_rng([cfg.seed, image.id])
    raster = check_raster(raster)[..., :3].copy()
    H, W = raster.shape[:2]
    mix = cfg.class_mix or {c: 1.0 for c in pools}
    class_ids = [c for c in sorted(mix) if mix[c] > 0 and pools.get(c)]
    warnings: list[str] = []
    if not class_ids:
        return raster, [], [], [f"image {image.id}: no objects for any weighted class"]
    probs = np.array([mix[c] for c in class_ids], dtype=float)
    probs /= probs.sum()
    gsd = compute_gsd(image.flight_meta, W) if image.flight_meta is not None else None
    if gsd is None:
        warnings.append(f"image {image.id}: no flight metadata, objects pasted unscaled")

    lo, hi = cfg.objects_per_image
    placed: list[BoundingBox] = []
    anns, placements = [], []
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = class_ids[int(rng.choice(len(class_ids), p=probs))]
        obj = pools[cls][int(rng.integers(len(pools[cls])))]
        try:
            crop = scale_object(obj, gsd) if gsd is not None else obj.crop.tight()
        except ObjectTooSmallError as exc:
            warnings.append(f"image {image.id}: {exc}")
            continue
        w, h = crop.width, crop.height
        x_hi, y_hi = W - cfg.margin - w, H - cfg.margin - h
        if x_hi < cfg.margin or y_hi < cfg.margin:
            warnings.append(f"image {image.id}: {w}x{h} object does not fit with margin {cfg.margin}")
            continue
        for _attempt in range(cfg.max_attempts):
            x = int(rng.integers(cfg.margin, x_hi + 1))
            y = int(rng.integers(cfg.margin, y_hi + 1))
            box = BoundingBox(x, y, x + w, y + h)
            if all(iou(box, other) <= cfg.max_overlap_iou for other in placed):
                break
        else:
            warnings.append(f"image {image.id}: no free position for {obj.name or 'object'} after {cfg.max_attempts} attempts")
            continue
        raster = blend(raster, crop, x, y, cfg.blend_strength)
        placed.append(box)
        anns.append(Annotation(image.id, crop.tight_box.translate(x, y), cls, source=obj.name or None))
        placements.append(Placement(image.id, cls, x, y, crop.alpha.copy()))
    return raster, anns, placements, warnings


def generate_pasted_dataset(
    backgrounds: Sequence[ImageRecord],
    objects: Sequence[PasteObject],
    cfg: PasteConfig,
    classes: Sequence[ClassLabel],
    loader: Callable[[ImageRecord], np.ndarray] | None = None,
    workers: int = 1,
) -> PasteRun:
    """Paste library objects onto object-free backgrounds and auto-label them.

    For each background the distributor draws an object count and classes,
    scales each object by the background's GSD when flight metadata is
    present, finds a position within the margin that overlaps earlier
    placements by at most ``cfg.max_overlap_iou`` and blends it in. Output
    images keep their background ids and get ``<stem>_pasted.png`` names.
    """
    if not backgrounds:
        raise ValueError("no background images")
    if not objects:
        raise ValueError("no paste objects")
    loader = loader or (lambda im: load_image(im.file_name))
    pools: dict[int, list[PasteObject]] = {}
    for obj in objects:
        pools.setdefault(obj.class_id, []).append(obj)

    def work(image: ImageRecord):
        return _paste_one(image, loader(image), pools, cfg)

    ordered = sorted(backgrounds, key=lambda r: r.id)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, ordered))
    else:
        results = [work(im) for im in ordered]

    images, annotations, placements, warnings, rasters = [], [], [], [], {}
    for im, (raster, anns, places, warns) in zip(ordered, results):
        images.append(
            ImageRecord(im.id, f"{Path(im.file_name).stem}_pasted.png", raster.shape[1], raster.shape[0], im.flight_meta)
        )
        rasters[im.id] = raster
        annotations.extend(anns)
        placements.extend(places)
        warnings.extend(warns)
    for w in warnings:
        log.warning(w)
    return PasteRun(AnnotatedDataset(images, annotations, list(classes)).renumbered(), rasters, placements, warnings)


# --- object library ---------------------------------------------------------


def load_object_library(root: str | Path, classes: Sequence[ClassLabel]) -> list[PasteObject]:
    """Read ``<root>/<class name>/<object>.png`` with ``<object>.json`` sidecars.

    Each sidecar holds ``{"max_width_m": <metres>}``.
    """
    root = Path(root)
    ids = {c.name: c.id for c in classes}
    objects = []
    for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        if class_dir.name not in ids:
            raise ValueError(f"object library class {class_dir.name!r} is not in the class catalog")
        for png in sorted(class_dir.glob("*.png")):
            meta_path = png.with_suffix(".json")
            if not meta_path.exists():
                raise FileNotFoundError(f"missing sidecar metadata {meta_path}")
            meta = json.loads(meta_path.read_text())
            rgba = load_image(png)
            if rgba.shape[2] != 4:
                raise ValueError(f"{png} has no alpha channel")
            objects.append(
                PasteObject(MaskedCrop.from_rgba(rgba), ids[class_dir.name], float(meta["max_width_m"]), png.stem)
            )
    return objects
