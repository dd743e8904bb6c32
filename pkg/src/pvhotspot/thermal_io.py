"""Thermal frame I/O: baseline TIFF subset, contrast stretch, letterbox, PNM output.

Only the TIFF flavour that radiometric drone cameras emit is handled:
one uncompressed, strip-organised, 16-bit grayscale image.  Anything
else is rejected with an error that names the offending tag.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from pvhotspot.errors import InvalidPercentiles, MalformedTiff, UnsupportedTiff

# TIFF tag ids used by the reader/writer
IMAGE_WIDTH = 256
IMAGE_LENGTH = 257
BITS_PER_SAMPLE = 258
COMPRESSION = 259
PHOTOMETRIC = 262
STRIP_OFFSETS = 273
SAMPLES_PER_PIXEL = 277
ROWS_PER_STRIP = 278
STRIP_BYTE_COUNTS = 279
PLANAR_CONFIG = 284
TILE_WIDTH = 322
TILE_LENGTH = 323
TILE_OFFSETS = 324
TILE_BYTE_COUNTS = 325
SAMPLE_FORMAT = 339

TAG_NAMES = {
    IMAGE_WIDTH: "ImageWidth",
    IMAGE_LENGTH: "ImageLength",
    BITS_PER_SAMPLE: "BitsPerSample",
    COMPRESSION: "Compression",
    PHOTOMETRIC: "PhotometricInterpretation",
    STRIP_OFFSETS: "StripOffsets",
    SAMPLES_PER_PIXEL: "SamplesPerPixel",
    ROWS_PER_STRIP: "RowsPerStrip",
    STRIP_BYTE_COUNTS: "StripByteCounts",
    PLANAR_CONFIG: "PlanarConfiguration",
    TILE_WIDTH: "TileWidth",
    TILE_LENGTH: "TileLength",
    TILE_OFFSETS: "TileOffsets",
    TILE_BYTE_COUNTS: "TileByteCounts",
    SAMPLE_FORMAT: "SampleFormat",
}

# field type -> (struct code, size in bytes)
_FIELD_TYPES = {
    1: ("B", 1),   # BYTE
    2: ("c", 1),   # ASCII
    3: ("H", 2),   # SHORT
    4: ("I", 4),   # LONG
    5: ("II", 8),  # RATIONAL
    6: ("b", 1),   # SBYTE
    7: ("B", 1),   # UNDEFINED
    8: ("h", 2),   # SSHORT
    9: ("i", 4),   # SLONG
    10: ("ii", 8),  # SRATIONAL
    11: ("f", 4),  # FLOAT
    12: ("d", 8),  # DOUBLE
}

PAD_VALUE = 128

CLASS_COLORS = {
    0: (255, 0, 0),
    1: (255, 255, 0),
    2: (255, 0, 255),
}


@dataclass(frozen=True, eq=False)
class ThermalFrame:
    """16-bit radiometric frame; ``pixels`` has shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"frame must be a non-empty 2-D grid, got shape {px.shape}")
        if px.dtype != np.uint16:
            if px.size and (px.min() < 0 or px.max() > 65535):
                raise ValueError("pixel values must fit in 16 bits")
            px = px.astype(np.uint16)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ThermalFrame):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class Image8:
    """8-bit image, shape (h, w) for gray or (h, w, 3) for color."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 3 and px.shape[2] != 3:
            raise ValueError("color images must have 3 channels")
        if px.ndim not in (2, 3) or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"bad image shape {px.shape}")
        object.__setattr__(self, "pixels", px.astype(np.uint8, copy=False))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.pixels.ndim == 2 else 3

    def __eq__(self, other):
        if not isinstance(other, Image8):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True)
class LetterboxTransform:
    scale: float
    offset_x: int
    offset_y: int
    src_width: int
    src_height: int
    dst_width: int
    dst_height: int


def round_half_up(x):
    """Round to nearest integer with .5 going up (works on scalars and arrays)."""
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


# --------------------------------------------------------------------------
# TIFF
# --------------------------------------------------------------------------

def _tag_label(tag):
    return f"{TAG_NAMES.get(tag, 'tag')} ({tag})"


def _read_ifd(data, offset, bo):
    if offset < 8 or offset + 2 > len(data):
        raise MalformedTiff(f"IFD offset {offset} outside file of {len(data)} bytes")
    (count,) = struct.unpack_from(bo + "H", data, offset)
    end = offset + 2 + 12 * count + 4
    if count == 0:
        raise MalformedTiff("IFD has no entries")
    if end > len(data):
        raise MalformedTiff(
            f"IFD at {offset} declares {count} entries but the file ends at {len(data)}"
        )
    tags = {}
    for i in range(count):
        pos = offset + 2 + 12 * i
        tag, ftype, n = struct.unpack_from(bo + "HHI", data, pos)
        if ftype not in _FIELD_TYPES:
            # unknown field types are skipped, as readers must
            continue
        code, size = _FIELD_TYPES[ftype]
        if ftype not in (1, 3, 4):
            tags[tag] = None
            continue
        nbytes = size * n
        if nbytes <= 4:
            vpos = pos + 8
        else:
            (vpos,) = struct.unpack_from(bo + "I", data, pos + 8)
            if vpos + nbytes > len(data):
                raise MalformedTiff(f"values of {_tag_label(tag)} run past end of file")
        tags[tag] = list(struct.unpack_from(f"{bo}{n}{code}", data, vpos))
    return tags


def _single(tags, tag, default=None):
    vals = tags.get(tag)
    if vals is None:
        if tag in tags:
            raise UnsupportedTiff(f"{_tag_label(tag)} has an unsupported field type")
        if default is None:
            raise MalformedTiff(f"required tag {_tag_label(tag)} missing")
        return default
    if len(vals) < 1:
        raise MalformedTiff(f"{_tag_label(tag)} has no values")
    return vals[0]


def load_tiff(data: bytes) -> ThermalFrame:
    """Decode a baseline 16-bit grayscale TIFF into a ThermalFrame.

    Either byte order is accepted.  Multi-strip images are concatenated
    in row order; only the first IFD is read.
    """
    data = bytes(data)
    if len(data) < 8:
        raise MalformedTiff("file shorter than the 8-byte TIFF header")
    if data[:2] == b"II":
        bo = "<"
    elif data[:2] == b"MM":
        bo = ">"
    else:
        raise MalformedTiff(f"bad byte-order mark {data[:2]!r}")
    magic, ifd_offset = struct.unpack_from(bo + "HI", data, 2)
    if magic != 42:
        raise MalformedTiff(f"bad magic number {magic}")
    tags = _read_ifd(data, ifd_offset, bo)

    for tag in (TILE_WIDTH, TILE_LENGTH, TILE_OFFSETS, TILE_BYTE_COUNTS):
        if tag in tags:
            raise UnsupportedTiff(f"tiled images are not supported ({_tag_label(tag)})")

    width = _single(tags, IMAGE_WIDTH)
    height = _single(tags, IMAGE_LENGTH)
    if width < 1 or height < 1:
        raise MalformedTiff(f"bad image dimensions {width}x{height}")

    if BITS_PER_SAMPLE not in tags:
        raise UnsupportedTiff(f"{_tag_label(BITS_PER_SAMPLE)} absent (defaults to 1), need 16")
    bits = tags[BITS_PER_SAMPLE]
    if bits is None or any(b != 16 for b in bits):
        raise UnsupportedTiff(f"{_tag_label(BITS_PER_SAMPLE)} = {bits}, need 16")
    spp = _single(tags, SAMPLES_PER_PIXEL, 1)
    if spp != 1:
        raise UnsupportedTiff(f"{_tag_label(SAMPLES_PER_PIXEL)} = {spp}, need 1")
    compression = _single(tags, COMPRESSION, 1)
    if compression != 1:
        raise UnsupportedTiff(f"{_tag_label(COMPRESSION)} = {compression}, need 1 (none)")
    photometric = _single(tags, PHOTOMETRIC)
    if photometric != 1:
        raise UnsupportedTiff(
            f"{_tag_label(PHOTOMETRIC)} = {photometric}, need 1 (BlackIsZero grayscale)"
        )
    sample_format = _single(tags, SAMPLE_FORMAT, 1)
    if sample_format != 1:
        raise UnsupportedTiff(f"{_tag_label(SAMPLE_FORMAT)} = {sample_format}, need 1 (uint)")
    planar = _single(tags, PLANAR_CONFIG, 1)
    if planar not in (1, 2):
        raise MalformedTiff(f"{_tag_label(PLANAR_CONFIG)} = {planar}")

    offsets = tags.get(STRIP_OFFSETS)
    counts = tags.get(STRIP_BYTE_COUNTS)
    if offsets is None:
        raise MalformedTiff(f"required tag {_tag_label(STRIP_OFFSETS)} missing")
    if counts is None:
        raise MalformedTiff(f"required tag {_tag_label(STRIP_BYTE_COUNTS)} missing")
    if len(offsets) != len(counts):
        raise MalformedTiff("StripOffsets and StripByteCounts differ in length")
    rows_per_strip = min(_single(tags, ROWS_PER_STRIP, 2**32 - 1), height)
    if rows_per_strip < 1:
        raise MalformedTiff(f"{_tag_label(ROWS_PER_STRIP)} = {rows_per_strip}")
    n_strips = -(-height // rows_per_strip)
    if len(offsets) < n_strips:
        raise MalformedTiff(f"expected {n_strips} strips, found {len(offsets)}")

    row_bytes = width * 2
    chunks = []
    for s in range(n_strips):
        rows = min(rows_per_strip, height - s * rows_per_strip)
        need = rows * row_bytes
        off, cnt = offsets[s], counts[s]
        if cnt < need:
            raise MalformedTiff(f"strip {s} holds {cnt} bytes, needs {need}")
        if off + need > len(data):
            raise MalformedTiff(f"strip {s} runs past end of file")
        chunks.append(data[off:off + need])

    dtype = np.dtype(bo + "u2")
    pixels = np.frombuffer(b"".join(chunks), dtype=dtype).reshape(height, width)
    return ThermalFrame(pixels.astype(np.uint16))


def write_tiff(frame: ThermalFrame, byteorder: str = "<") -> bytes:
    """Serialise as a single-strip uncompressed 16-bit grayscale TIFF.

    Little-endian by default; ``byteorder=">"`` is available for fixtures.
    """
    if byteorder not in ("<", ">"):
        raise ValueError("byteorder must be '<' or '>'")
    h, w = frame.height, frame.width
    nbytes = w * h * 2
    entries = [
        (IMAGE_WIDTH, 4, w),
        (IMAGE_LENGTH, 4, h),
        (BITS_PER_SAMPLE, 3, 16),
        (COMPRESSION, 3, 1),
        (PHOTOMETRIC, 3, 1),
        (STRIP_OFFSETS, 4, None),
        (SAMPLES_PER_PIXEL, 3, 1),
        (ROWS_PER_STRIP, 4, h),
        (STRIP_BYTE_COUNTS, 4, nbytes),
    ]
    ifd_offset = 8
    data_offset = ifd_offset + 2 + 12 * len(entries) + 4
    bo = byteorder
    out = bytearray(b"II" if bo == "<" else b"MM")
    out += struct.pack(bo + "HI", 42, ifd_offset)
    out += struct.pack(bo + "H", len(entries))
    for tag, ftype, value in entries:
        if value is None:
            value = data_offset
        if ftype == 3:
            out += struct.pack(bo + "HHIHH", tag, ftype, 1, value, 0)
        else:
            out += struct.pack(bo + "HHII", tag, ftype, 1, value)
    out += struct.pack(bo + "I", 0)
    out += frame.pixels.astype(bo + "u2").tobytes()
    return bytes(out)


# --------------------------------------------------------------------------
# Display conversion
# --------------------------------------------------------------------------

def nearest_rank(sorted_or_flat: np.ndarray, pct: float) -> int:
    """Nearest-rank percentile: the ceil(pct/100 * N)-th smallest value (rank >= 1)."""
    flat = np.asarray(sorted_or_flat).ravel()
    n = flat.size
    rank = math.ceil(Fraction(repr(float(pct))) * n / 100)
    idx = min(max(rank, 1), n) - 1
    return int(np.partition(flat, idx)[idx])


def contrast_stretch(frame: ThermalFrame, lo_pct: float = 2.0, hi_pct: float = 98.0) -> Image8:
    """Percentile min-max stretch of a radiometric frame to 8-bit gray.

    Exact integer arithmetic, so the result is unchanged by any
    order-preserving integer affine map of the input.
    """
    if not (0 <= lo_pct < hi_pct <= 100):
        raise InvalidPercentiles(
            f"need 0 <= lo < hi <= 100, got lo={lo_pct}, hi={hi_pct}"
        )
    v = frame.pixels.astype(np.int64)
    lo = nearest_rank(v, lo_pct)
    hi = nearest_rank(v, hi_pct)
    if hi == lo:
        return Image8(np.zeros_like(frame.pixels, dtype=np.uint8))
    d = hi - lo
    # round-half-up of (v - lo) * 255 / d
    out = ((v - lo) * 510 + d) // (2 * d)
    return Image8(np.clip(out, 0, 255).astype(np.uint8))


def letterbox_transform(src_width, src_height, dst_width, dst_height) -> LetterboxTransform:
    scale = min(dst_width / src_width, dst_height / src_height)
    new_w = max(1, int(round_half_up(src_width * scale)))
    new_h = max(1, int(round_half_up(src_height * scale)))
    return LetterboxTransform(
        scale=scale,
        offset_x=(dst_width - new_w) // 2,
        offset_y=(dst_height - new_h) // 2,
        src_width=src_width,
        src_height=src_height,
        dst_width=dst_width,
        dst_height=dst_height,
    )


def _sample_positions(n_out, n_src, scale):
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    pos = np.clip(pos, 0.0, n_src - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    return i0, i1, pos - i0


def letterbox(image: Image8, dst_width: int, dst_height: int):
    """Aspect-preserving bilinear resize onto a ``dst`` canvas padded with 128.

    Returns ``(Image8, LetterboxTransform)``.
    """
    if image.channels != 1:
        raise ValueError("letterbox expects a single-channel image")
    if dst_width < 1 or dst_height < 1:
        raise ValueError("destination dimensions must be >= 1")
    t = letterbox_transform(image.width, image.height, dst_width, dst_height)
    new_w = max(1, int(round_half_up(image.width * t.scale)))
    new_h = max(1, int(round_half_up(image.height * t.scale)))

    src = image.pixels.astype(np.float64)
    y0, y1, fy = _sample_positions(new_h, image.height, t.scale)
    x0, x1, fx = _sample_positions(new_w, image.width, t.scale)
    # a + (b - a) * f keeps constant regions exact
    top = src[y0][:, x0] + (src[y0][:, x1] - src[y0][:, x0]) * fx
    bot = src[y1][:, x0] + (src[y1][:, x1] - src[y1][:, x0]) * fx
    resized = top + (bot - top) * fy[:, None]
    resized = np.clip(round_half_up(resized), 0, 255).astype(np.uint8)

    canvas = np.full((dst_height, dst_width), PAD_VALUE, dtype=np.uint8)
    canvas[t.offset_y:t.offset_y + new_h, t.offset_x:t.offset_x + new_w] = resized
    return Image8(canvas), t


def render_overlay(image: Image8, detections) -> Image8:
    """Draw each detection as a 2-px rectangle in its class color on an RGB copy."""
    if image.channels != 1:
        raise ValueError("render_overlay expects a single-channel image")
    rgb = np.repeat(image.pixels[:, :, None], 3, axis=2)
    h, w = image.height, image.width
    for det in detections:
        b = det.bbox
        x0 = math.floor(b.x)
        y0 = math.floor(b.y)
        x1 = math.ceil(b.x + b.w) - 1
        y1 = math.ceil(b.y + b.h) - 1
        if x1 < x0 or y1 < y0:
            continue
        color = np.array(CLASS_COLORS.get(det.class_id, (0, 255, 0)), dtype=np.uint8)
        cx0, cx1 = max(x0, 0), min(x1, w - 1)
        cy0, cy1 = max(y0, 0), min(y1, h - 1)
        if cx0 > cx1 or cy0 > cy1:
            continue
        # horizontal edges
        for row in (y0, y0 + 1, y1 - 1, y1):
            if y0 <= row <= y1 and 0 <= row < h:
                rgb[row, cx0:cx1 + 1] = color
        # vertical edges
        for col in (x0, x0 + 1, x1 - 1, x1):
            if x0 <= col <= x1 and 0 <= col < w:
                rgb[cy0:cy1 + 1, col] = color
    return Image8(rgb)


def encode_pnm(image: Image8) -> bytes:
    """Binary PGM (P5) for gray, PPM (P6) for RGB; maxval 255."""
    magic = "P5" if image.channels == 1 else "P6"
    header = f"{magic}\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(image.pixels, dtype=np.uint8).tobytes()


def read_tiff_file(path) -> ThermalFrame:
    with open(path, "rb") as fh:
        return load_tiff(fh.read())
