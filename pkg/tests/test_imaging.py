import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from odpkit.annotations import FlightMeta
from odpkit.geometry import BoundingBox
from odpkit.imaging import (
    MaskedCrop,
    OutOfBoundsError,
    UnsupportedFormatError,
    composite,
    crop,
    load_camera_table,
    load_image,
    opaque_extent,
    read_exif,
    resize,
    save_image,
)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (12, 17, 3), dtype=np.uint8)
    save_image(img, tmp_path / "a.png")
    assert np.array_equal(load_image(tmp_path / "a.png"), img)


def test_rgba_png_keeps_alpha(tmp_path):
    img = np.zeros((5, 6, 4), dtype=np.uint8)
    img[1:3, 2:4] = (200, 10, 10, 255)
    save_image(img, tmp_path / "obj.png")
    back = load_image(tmp_path / "obj.png")
    assert back.shape == (5, 6, 4) and np.array_equal(back, img)


def test_unsupported_format(tmp_path):
    with pytest.raises(UnsupportedFormatError):
        save_image(np.zeros((2, 2, 3), np.uint8), tmp_path / "x.bmp")
    (tmp_path / "bad.png").write_bytes(b"not an image")
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "bad.png")


def test_crop_bounds():
    img = np.zeros((10, 10, 3), np.uint8)
    assert crop(img, BoundingBox(2, 3, 6, 9)).shape == (6, 4, 3)
    with pytest.raises(OutOfBoundsError):
        crop(img, BoundingBox(5, 5, 12, 8))


def test_opaque_extent():
    a = np.zeros((8, 8), np.uint8)
    assert opaque_extent(a) is None
    a[2, 3] = 1
    a[5, 6] = 9
    assert opaque_extent(a) == BoundingBox(3, 2, 7, 6)


@given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
def test_composite_formula(c, b, a):
    base = np.full((1, 1, 3), b, np.uint8)
    obj = np.zeros((1, 1, 4), np.uint8)
    obj[0, 0] = (c, c, c, max(a, 1))
    out = composite(base, MaskedCrop.from_rgba(obj), 0, 0)
    a = max(a, 1)
    assert out[0, 0, 0] == (c * a + b * (255 - a) + 127) // 255


def test_composite_out_of_bounds():
    obj = MaskedCrop.from_rgba(np.full((4, 4, 4), 255, np.uint8))
    with pytest.raises(OutOfBoundsError):
        composite(np.zeros((5, 5, 3), np.uint8), obj, 2, 0)


def test_resize_preserves_constant_colour():
    img = np.full((7, 9, 3), (12, 200, 77), np.uint8)
    out = resize(img, 31, 4)
    assert out.shape == (4, 31, 3) and (out == (12, 200, 77)).all()


def test_camera_table_bundled():
    table = load_camera_table()
    assert table["FC6310"] == pytest.approx(13.2)


def _jpeg_with_exif(path, model=None, focal=None, gps_alt=None, f35=None, xmp=None):
    exif = Image.Exif()
    if model:
        exif[0x0110] = model
    ifd = exif.get_ifd(0x8769)
    if focal is not None:
        ifd[0x920A] = focal
    if f35 is not None:
        ifd[0xA405] = f35
    if gps_alt is not None:
        exif.get_ifd(0x8825)[6] = gps_alt
    kwargs = {"exif": exif}
    if xmp is not None:
        kwargs["xmp"] = xmp.encode()
    Image.new("RGB", (8, 8)).save(path, "JPEG", **kwargs)


def test_exif_camera_table(tmp_path):
    p = tmp_path / "dji.jpg"
    _jpeg_with_exif(p, model="FC6310", focal=8.8, gps_alt=512.0)
    assert read_exif(p) == FlightMeta(512.0, 8.8, 13.2)


def test_exif_prefers_relative_altitude(tmp_path):
    p = tmp_path / "dji.jpg"
    xmp = '<x:xmpmeta><rdf:Description drone-dji:RelativeAltitude="+100.20"/></x:xmpmeta>'
    _jpeg_with_exif(p, model="FC6310", focal=8.8, gps_alt=512.0, xmp=xmp)
    assert read_exif(p).altitude_m == pytest.approx(100.2)


def test_exif_35mm_fallback(tmp_path):
    p = tmp_path / "other.jpg"
    _jpeg_with_exif(p, model="Unknown", focal=9.0, gps_alt=60.0, f35=24)
    meta = read_exif(p)
    assert meta.sensor_width_mm == pytest.approx(36 * 9.0 / 24)


def test_exif_insufficient(tmp_path):
    p = tmp_path / "none.jpg"
    _jpeg_with_exif(p, model="FC6310", focal=8.8)
    assert read_exif(p) is None
