"""Raster primitives: load/save, crop, resize, alpha compositing, EXIF.

Rasters are plain ``uint8`` numpy arrays of shape ``(H, W, 3)`` (RGB) or
``(H, W, 4)`` (RGBA).
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .annotations import FlightMeta
from .geometry import BoundingBox

log = logging.getLogger(__name__)

_FORMATS = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}

_TAG_MODEL = 0x0110
_IFD_EXIF = 0x8769
_IFD_GPS = 0x8825
_TAG_FOCAL_LENGTH = 0x920A
_TAG_FOCAL_35MM = 0xA405
_TAG_GPS_ALTITUDE = 6
_FULL_FRAME_WIDTH_MM = 36.0
_RELATIVE_ALTITUDE = re.compile(rb'RelativeAltitude(?:="|>)\s*([+-]?\d+(?:\.\d+)?)')


class UnsupportedFormatError(ValueError):
    pass


class OutOfBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class MaskedCrop:
    """RGBA object cut-out. ``tight_box`` bounds every pixel with alpha > 0."""

    raster: np.ndarray
    tight_box: BoundingBox

    @classmethod
    def from_rgba(cls, rgba: np.ndarray) -> "MaskedCrop":
        rgba = check_raster(rgba)
        if rgba.shape[2] != 4:
            raise ValueError("masked crops need an alpha channel")
        box = opaque_extent(rgba[..., 3])
        if box is None:
            raise ValueError("crop has no opaque pixels")
        return cls(rgba, box)

    @property
    def width(self) -> int:
        return self.raster.shape[1]

    @property
    def height(self) -> int:
        return self.raster.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return self.raster[..., 3]

    def tight(self) -> "MaskedCrop":
        """Copy cropped to the opaque extent."""
        b = self.tight_box
        sub = self.raster[int(b.y_min) : int(b.y_max), int(b.x_min) : int(b.x_max)].copy()
        return MaskedCrop(sub, BoundingBox(0, 0, sub.shape[1], sub.shape[0]))


def check_raster(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r)
    if r.dtype != np.uint8 or r.ndim != 3 or r.shape[2] not in (3, 4):
        raise ValueError(f"expected uint8 HxWx3 or HxWx4 raster, got {r.dtype} {r.shape}")
    if r.shape[0] == 0 or r.shape[1] == 0:
        raise ValueError("raster has zero size")
    return r


def opaque_extent(alpha: np.ndarray) -> BoundingBox | None:
    """Minimal pixel box around ``alpha > 0``, or ``None`` if fully transparent."""
    cols = np.flatnonzero(alpha.any(axis=0))
    rows = np.flatnonzero(alpha.any(axis=1))
    if cols.size == 0:
        return None
    return BoundingBox(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def load_image(path: str | Path) -> np.ndarray:
    """Read a PNG/JPEG as RGB, or RGBA when the file carries transparency."""
    path = Path(path)
    if path.suffix.lower() not in _FORMATS:
        raise UnsupportedFormatError(f"unsupported image format: {path.suffix or path.name}")
    try:
        with Image.open(path) as im:
            mode = "RGBA" if (im.mode in ("RGBA", "LA", "PA") or "transparency" in im.info) else "RGB"
            return np.asarray(im.convert(mode)).copy()
    except UnidentifiedImageError as exc:
        raise UnsupportedFormatError(f"cannot decode {path}") from exc


def save_image(r: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise UnsupportedFormatError(f"unsupported image format: {path.suffix or path.name}")
    r = check_raster(r)
    if fmt == "JPEG" and r.shape[2] == 4:
        r = r[..., :3]
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(r).save(path, format=fmt, **({"quality": 95} if fmt == "JPEG" else {}))


def pixel_box(box: BoundingBox) -> tuple[int, int, int, int]:
    return tuple(int(round(v)) for v in box.as_tuple())  # type: ignore[return-value]


def crop(r: np.ndarray, box: BoundingBox) -> np.ndarray:
    r = check_raster(r)
    x0, y0, x1, y1 = pixel_box(box)
    h, w = r.shape[:2]
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise OutOfBoundsError(f"crop {box} exceeds {w}x{h} image")
    if x1 <= x0 or y1 <= y0:
        raise OutOfBoundsError(f"crop {box} has no area after rounding")
    return r[y0:y1, x0:x1].copy()


def resize(r: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    """Bilinear resize. RGBA input is resampled with premultiplied alpha."""
    r = check_raster(r)
    if new_w <= 0 or new_h <= 0:
        raise ValueError(f"target size must be positive, got {new_w}x{new_h}")
    if (new_w, new_h) == (r.shape[1], r.shape[0]):
        return r.copy()
    return np.asarray(Image.fromarray(r).resize((int(new_w), int(new_h)), Image.BILINEAR)).copy()


def composite(base: np.ndarray, obj: MaskedCrop, x: int, y: int) -> np.ndarray:
    """Alpha-blend ``obj`` onto a copy of ``base`` with its top-left at ``(x, y)``."""
    base = check_raster(base)
    h, w = obj.height, obj.width
    if x < 0 or y < 0 or x + w > base.shape[1] or y + h > base.shape[0]:
        raise OutOfBoundsError(f"{w}x{h} object at ({x}, {y}) leaves the {base.shape[1]}x{base.shape[0]} image")
    out = base.copy()
    region = out[y : y + h, x : x + w, :3].astype(np.uint32)
    a = obj.raster[..., 3:4].astype(np.uint32)
    blended = (obj.raster[..., :3].astype(np.uint32) * a + region * (255 - a) + 127) // 255
    out[y : y + h, x : x + w, :3] = blended.astype(np.uint8)
    return out


# --- EXIF -------------------------------------------------------------------


def load_camera_table(path: str | Path | None = None) -> dict[str, float]:
    """Camera model -> sensor width (mm). Defaults to the bundled table."""
    if path is None:
        text = resources.files("odpkit").joinpath("data/camera_sensors.json").read_text()
    else:
        text = Path(path).read_text()
    return {str(k): float(v) for k, v in json.loads(text).items()}


def _as_float(v) -> float | None:
    if v is None:
        return None
    if isinstance(v, tuple) and len(v) == 2:
        return v[0] / v[1] if v[1] else None
    try:
        return float(v)
    except (TypeError, ValueError):
        return None


def read_exif(path: str | Path, camera_table: Mapping[str, float] | None = None) -> FlightMeta | None:
    """Flight metadata from EXIF/XMP, or ``None`` when tags are insufficient.

    Altitude prefers the vendor ``RelativeAltitude`` XMP field and falls back
    to ``GPSAltitude``. Sensor width comes from ``camera_table`` keyed by the
    EXIF camera model, then from the 35 mm equivalent focal length.
    """
    path = Path(path)
    raw = path.read_bytes()
    table = load_camera_table() if camera_table is None else camera_table
    try:
        with Image.open(path) as im:
            exif = im.getexif()
    except UnidentifiedImageError:
        return None

    exif_ifd = exif.get_ifd(_IFD_EXIF)
    focal = _as_float(exif_ifd.get(_TAG_FOCAL_LENGTH, exif.get(_TAG_FOCAL_LENGTH)))

    m = _RELATIVE_ALTITUDE.search(raw)
    if m:
        altitude = float(m.group(1))
    else:
        altitude = _as_float(exif.get_ifd(_IFD_GPS).get(_TAG_GPS_ALTITUDE))

    model = exif.get(_TAG_MODEL)
    model = model.strip("\x00 ").strip() if isinstance(model, str) else None
    sensor = table.get(model) if model else None
    if sensor is None and focal:
        f35 = _as_float(exif_ifd.get(_TAG_FOCAL_35MM))
        if f35:
            sensor = _FULL_FRAME_WIDTH_MM * focal / f35

    if not (altitude and altitude > 0 and focal and focal > 0 and sensor):
        log.debug("%s: insufficient flight metadata (alt=%s focal=%s sensor=%s)", path, altitude, focal, sensor)
        return None
    return FlightMeta(altitude, focal, sensor)
