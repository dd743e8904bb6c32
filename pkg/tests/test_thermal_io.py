import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import hand_tiff, read_pnm
from pvhotspot.errors import InvalidPercentiles, MalformedTiff, UnsupportedTiff
from pvhotspot.geometry import BBox, Detection
from pvhotspot.thermal_io import (
    CLASS_COLORS,
    Image8,
    ThermalFrame,
    contrast_stretch,
    encode_pnm,
    letterbox,
    load_tiff,
    render_overlay,
    write_tiff,
)


def random_frame(rng, h, w):
    return ThermalFrame(rng.integers(0, 65536, size=(h, w), dtype=np.uint16))


# ------------------------------------------------------------------ TIFF

def test_tiff_round_trip_random():
    rng = np.random.default_rng(1)
    for _ in range(20):
        h, w = rng.integers(1, 60, size=2)
        f = random_frame(rng, h, w)
        assert load_tiff(write_tiff(f)) == f


def test_big_endian_hand_assembled_pixel():
    data = hand_tiff(1, 1, [0xBEEF], byteorder=">")
    assert data[:4] == b"MM\x00*"
    assert load_tiff(data).pixels.tolist() == [[0xBEEF]]


@pytest.mark.parametrize("bo", ["<", ">"])
def test_multi_strip_concatenated_in_row_order(bo):
    vals = list(range(5 * 7))
    frame = load_tiff(hand_tiff(5, 7, vals, byteorder=bo, rows_per_strip=3))
    assert frame.pixels.ravel().tolist() == vals


def test_endianness_equivalence():
    f = random_frame(np.random.default_rng(2), 9, 13)
    assert load_tiff(write_tiff(f, ">")) == load_tiff(write_tiff(f, "<")) == f


def test_write_tiff_strip_byte_count_2x2():
    data = write_tiff(ThermalFrame(np.array([[0, 1], [2, 3]], dtype=np.uint16)))
    n = struct.unpack_from("<H", data, 8)[0]
    entries = {}
    for i in range(n):
        tag, ftype, count, value = struct.unpack_from("<HHII", data, 10 + 12 * i)
        entries[tag] = value if ftype == 4 else value & 0xFFFF
    assert entries[279] == 8
    assert data[entries[273]:entries[273] + 8] == b"\0\0\1\0\2\0\3\0"


def test_one_pixel_file_is_small():
    assert len(write_tiff(ThermalFrame(np.array([[5]], dtype=np.uint16)))) <= 512


def test_truncated_ifd_is_malformed():
    data = write_tiff(ThermalFrame(np.ones((4, 4), dtype=np.uint16)))
    assert data[:4] == b"II*\0"
    with pytest.raises(MalformedTiff):
        load_tiff(data[:30])


@pytest.mark.parametrize("blob", [b"", b"II*", b"XX*\0\x08\0\0\0", b"II\x2b\0\x08\0\0\0"])
def test_bad_headers(blob):
    with pytest.raises(MalformedTiff):
        load_tiff(blob)


def _patch_tag(data, tag, new_value):
    n = struct.unpack_from("<H", data, 8)[0]
    out = bytearray(data)
    for i in range(n):
        pos = 10 + 12 * i
        t, ftype = struct.unpack_from("<HH", out, pos)
        if t == tag:
            if ftype == 3:
                struct.pack_into("<H", out, pos + 8, new_value)
            else:
                struct.pack_into("<I", out, pos + 8, new_value)
            return bytes(out)
    raise AssertionError("tag not found")


@pytest.mark.parametrize("tag,value,name", [
    (259, 5, "Compression"),
    (258, 8, "BitsPerSample"),
    (277, 3, "SamplesPerPixel"),
    (262, 2, "PhotometricInterpretation"),
])
def test_unsupported_tags_are_named(tag, value, name):
    data = write_tiff(ThermalFrame(np.ones((2, 2), dtype=np.uint16)))
    with pytest.raises(UnsupportedTiff, match=name):
        load_tiff(_patch_tag(data, tag, value))


def test_tiled_tiff_rejected():
    data = bytearray(write_tiff(ThermalFrame(np.ones((2, 2), dtype=np.uint16))))
    # relabel RowsPerStrip (278) as TileWidth (322)
    n = struct.unpack_from("<H", data, 8)[0]
    for i in range(n):
        if struct.unpack_from("<H", data, 10 + 12 * i)[0] == 278:
            struct.pack_into("<H", data, 10 + 12 * i, 322)
    with pytest.raises(UnsupportedTiff, match="TileWidth"):
        load_tiff(bytes(data))


def test_strip_past_eof_is_malformed():
    data = write_tiff(ThermalFrame(np.ones((4, 4), dtype=np.uint16)))
    with pytest.raises(MalformedTiff):
        load_tiff(data[:-3])


# ------------------------------------------------------------------ stretch

def test_stretch_constant_frame_is_black():
    out = contrast_stretch(ThermalFrame(np.full((5, 5), 3000, dtype=np.uint16)), 2, 98)
    assert not out.pixels.any()


def test_stretch_hand_values():
    f = ThermalFrame(np.array([[0, 1000], [2000, 4000]], dtype=np.uint16))
    assert contrast_stretch(f, 0, 100).pixels.ravel().tolist() == [0, 64, 128, 255]


def test_stretch_round_half_up():
    # (v - lo) * 255 / 510 = 0.5 exactly for v = 1
    f = ThermalFrame(np.array([[0, 1, 510]], dtype=np.uint16))
    assert contrast_stretch(f, 0, 100).pixels.ravel().tolist() == [0, 1, 255]


def test_stretch_nearest_rank_clamps():
    vals = np.arange(100, dtype=np.uint16).reshape(10, 10)
    # nearest rank: ceil(2/100*100) = 2nd smallest = 1; ceil(98) = 98th = 97
    out = contrast_stretch(ThermalFrame(vals), 2, 98).pixels.ravel()
    assert out[0] == 0 and out[1] == 0 and out[97] == 255 and out[99] == 255
    assert out[49] == (48 * 510 + 96) // 192


@pytest.mark.parametrize("lo,hi", [(50, 50), (60, 40), (-1, 50), (0, 101)])
def test_stretch_bad_percentiles(lo, hi):
    with pytest.raises(InvalidPercentiles):
        contrast_stretch(ThermalFrame(np.zeros((2, 2), dtype=np.uint16)), lo, hi)


def test_stretch_monotone():
    rng = np.random.default_rng(3)
    for _ in range(50):
        f = random_frame(rng, *rng.integers(1, 20, size=2))
        v = f.pixels.ravel().astype(np.int64)
        o = contrast_stretch(f, 2, 98).pixels.ravel().astype(np.int64)
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(o[order]) >= 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 5), st.integers(0, 1000),
       st.integers(0, 2**32 - 1))
def test_stretch_affine_invariance(h, w, a, b, seed):
    rng = np.random.default_rng(seed)
    v = rng.integers(0, (65535 - b) // a + 1, size=(h, w))
    base = contrast_stretch(ThermalFrame(v.astype(np.uint16)), 2, 98)
    moved = contrast_stretch(ThermalFrame((a * v + b).astype(np.uint16)), 2, 98)
    assert base == moved


# ------------------------------------------------------------------ letterbox

def test_letterbox_identity():
    img = Image8(np.random.default_rng(4).integers(0, 256, size=(416, 416)))
    out, t = letterbox(img, 416, 416)
    assert (t.scale, t.offset_x, t.offset_y) == (1.0, 0, 0)
    assert out == img


def test_letterbox_wide_image_padding():
    img = Image8(np.random.default_rng(5).integers(0, 256, size=(100, 200)))
    out, t = letterbox(img, 400, 400)
    assert t.scale == 2.0 and t.offset_x == 0 and t.offset_y == 100
    assert (out.pixels[:100] == 128).all() and (out.pixels[300:] == 128).all()


@pytest.mark.parametrize("src,dst", [((37, 91), (416, 416)), ((300, 20), (64, 96)), ((5, 5), (3, 7))])
def test_letterbox_constant_image(src, dst):
    img = Image8(np.full(src, 77, dtype=np.uint8))
    out, t = letterbox(img, *dst)
    nh = int(np.floor(src[0] * t.scale + 0.5))
    nw = int(np.floor(src[1] * t.scale + 0.5))
    region = np.zeros(out.pixels.shape, dtype=bool)
    region[t.offset_y:t.offset_y + nh, t.offset_x:t.offset_x + nw] = True
    assert (out.pixels[region] == 77).all()
    assert (out.pixels[~region] == 128).all()
    assert t.offset_x == (dst[0] - nw) // 2 and t.offset_y == (dst[1] - nh) // 2


def test_letterbox_bilinear_upsample_values():
    # 1x2 image [0, 100] upscaled by 2: src x = (d + 0.5)/2 - 0.5 -> -0.25, 0.25, 0.75, 1.25
    img = Image8(np.array([[0, 100]], dtype=np.uint8))
    out, t = letterbox(img, 4, 2)
    assert t.scale == 2.0
    assert out.pixels[0].tolist() == [0, 25, 75, 100]


# ------------------------------------------------------------------ overlay

def test_overlay_no_detections_replicates_gray():
    img = Image8(np.random.default_rng(6).integers(0, 256, size=(8, 9)))
    out = render_overlay(img, [])
    assert out.channels == 3
    assert all((out.pixels[:, :, c] == img.pixels).all() for c in range(3))


def test_overlay_full_frame_box_colors_border():
    img = Image8(np.zeros((10, 12), dtype=np.uint8))
    det = Detection(BBox(0, 0, 12, 10), 1, 0.9)
    out = render_overlay(img, [det]).pixels
    yellow = CLASS_COLORS[1]
    for y, x in [(0, 0), (9, 11), (0, 5), (1, 5), (5, 0), (5, 1), (5, 10), (8, 4)]:
        assert tuple(out[y, x]) == yellow
    assert tuple(out[5, 5]) == (0, 0, 0)


def test_overlay_clipped_box_and_untouched_input():
    gray = np.full((10, 10), 50, dtype=np.uint8)
    img = Image8(gray.copy())
    det = Detection(BBox(5, -5, 10, 10), 0, 0.5)
    out = render_overlay(img, [det]).pixels
    assert (img.pixels == gray).all()
    # oracle: clipped rectangle rasterisation of the 2-px outline
    expected = np.repeat(gray[:, :, None], 3, axis=2)
    x0, x1, y0, y1 = 5, 14, -5, 4
    for y in range(10):
        for x in range(10):
            inside = x0 <= x <= x1 and y0 <= y <= y1
            edge = min(x - x0, x1 - x, y - y0, y1 - y) < 2
            if inside and edge:
                expected[y, x] = CLASS_COLORS[0]
    assert (out == expected).all()


def test_overlay_changes_only_near_edges():
    rng = np.random.default_rng(7)
    img = Image8(rng.integers(0, 256, size=(40, 50)))
    dets = [Detection(BBox(*rng.uniform(0, 30, 2), *rng.uniform(1, 20, 2)), int(rng.integers(3)), 0.5)
            for _ in range(5)]
    out = render_overlay(img, dets).pixels
    changed = (out != np.repeat(img.pixels[:, :, None], 3, axis=2)).any(axis=2)
    for y, x in zip(*np.nonzero(changed)):
        near = False
        for d in dets:
            b = d.bbox
            dx = max(b.x - (x + 1), x - (b.x + b.w), 0)
            dy = max(b.y - (y + 1), y - (b.y + b.h), 0)
            on_edge = min(abs(x - b.x), abs(x + 1 - b.x - b.w), abs(y - b.y), abs(y + 1 - b.y - b.h)) <= 2
            if dx <= 0 and dy <= 0 and on_edge:
                near = True
        assert near


# ------------------------------------------------------------------ PNM

def test_pnm_minimal_gray():
    assert encode_pnm(Image8(np.array([[7]], dtype=np.uint8))) == b"P5\n1 1\n255\n\x07"


def test_pnm_rgb_payload_size():
    data = encode_pnm(Image8(np.zeros((1, 2, 3), dtype=np.uint8)))
    assert data.startswith(b"P6\n2 1\n255\n")
    assert len(data) - len(b"P6\n2 1\n255\n") == 6


@pytest.mark.parametrize("channels", [1, 3])
def test_pnm_round_trip_via_oracle_reader(channels):
    rng = np.random.default_rng(8)
    for _ in range(10):
        h, w = rng.integers(1, 30, size=2)
        shape = (h, w) if channels == 1 else (h, w, 3)
        img = Image8(rng.integers(0, 256, size=shape, dtype=np.uint8))
        rw, rh, rc, raw = read_pnm(encode_pnm(img))
        assert (rw, rh, rc) == (w, h, channels)
        assert np.frombuffer(raw, dtype=np.uint8).reshape(shape).tolist() == img.pixels.tolist()
