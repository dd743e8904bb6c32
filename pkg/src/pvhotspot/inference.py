"""Forward-pass engine for linear conv/maxpool chains ending in a region head.

Networks are described by darknet-style cfg text and darknet binary
weights.  Batch norm is folded into the convolution at load time, so
inference is plain cross-correlation + bias + activation.

Tensors are ``float32`` numpy arrays of shape (channels, height, width).
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pvhotspot.errors import BadHeader, CfgError, NonFiniteWeight, NotLoaded, ShapeMismatch, WeightSizeMismatch

BN_EPS = 1e-5
LEAKY_SLOPE = np.float32(0.1)
ACTIVATIONS = ("leaky", "linear")


@dataclass(frozen=True, eq=False)
class LayerSpec:
    kind: str  # "convolutional" | "maxpool" | "region_head"
    filters: int = 0
    size: int = 1
    stride: int = 1
    pad: bool = False
    batch_normalize: bool = False
    activation: str = "linear"
    anchors: tuple = ()
    num_anchors: int = 0
    classes: int = 0
    weights: np.ndarray | None = None  # (filters, in_channels, size, size), folded
    biases: np.ndarray | None = None   # (filters,), folded

    @property
    def padding(self) -> int:
        return self.size // 2 if self.pad else 0


@dataclass(frozen=True, eq=False)
class NetworkModel:
    input_width: int
    input_height: int
    input_channels: int
    layers: tuple
    # shapes[i] is the (c, h, w) output of layers[i]
    shapes: tuple
    loaded: bool = False

    @property
    def input_shape(self):
        return (self.input_channels, self.input_height, self.input_width)

    @property
    def head(self) -> LayerSpec:
        return self.layers[-1]

    def input_shape_of(self, i):
        return self.input_shape if i == 0 else self.shapes[i - 1]


# --------------------------------------------------------------------------
# cfg parsing
# --------------------------------------------------------------------------

_SECTION_KIND = {"convolutional": "convolutional", "conv": "convolutional",
                 "maxpool": "maxpool", "max": "maxpool", "region": "region_head"}


def _read_sections(text):
    sections = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise CfgError(f"malformed section header {line!r}", line=lineno)
            sections.append((line[1:-1].strip().lower(), lineno, {}))
            continue
        if "=" not in line:
            raise CfgError(f"expected key=value, got {line!r}", line=lineno)
        if not sections:
            raise CfgError("key outside any section", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        sections[-1][2][key] = (value, lineno)
    return sections


def _int(opts, key, section, line, default=None):
    if key not in opts:
        if default is None:
            raise CfgError(f"missing key {key!r}", section=section, line=line)
        return default
    value, vline = opts[key]
    try:
        return int(value)
    except ValueError:
        raise CfgError(f"{key}={value!r} is not an integer", section=section, line=vline) from None


def _out_dim(n, size, stride, pad):
    return (n + 2 * pad - size) // stride + 1


def parse_cfg(text: str) -> NetworkModel:
    """Parse cfg text into a shape-checked NetworkModel without weights."""
    sections = _read_sections(text)
    if not sections or sections[0][0] not in ("net", "network"):
        line = sections[0][1] if sections else None
        raise CfgError("first section must be [net]", line=line)
    name, line, opts = sections[0]
    width = _int(opts, "width", name, line)
    height = _int(opts, "height", name, line)
    channels = _int(opts, "channels", name, line)
    if min(width, height, channels) < 1:
        raise CfgError("width, height and channels must be >= 1", section=name, line=line)

    layers, shapes = [], []
    c, h, w = channels, height, width
    for name, line, opts in sections[1:]:
        kind = _SECTION_KIND.get(name)
        if kind is None:
            raise CfgError(f"unknown section [{name}]", section=name, line=line)
        if layers and layers[-1].kind == "region_head":
            raise CfgError("region head must be the last layer", section=name, line=line)
        if kind == "convolutional":
            filters = _int(opts, "filters", name, line)
            size = _int(opts, "size", name, line)
            stride = _int(opts, "stride", name, line, 1)
            pad = bool(_int(opts, "pad", name, line, 0))
            bn = bool(_int(opts, "batch_normalize", name, line, 0))
            act = opts.get("activation", ("linear", line))[0].lower()
            if act not in ACTIVATIONS:
                raise CfgError(f"unsupported activation {act!r}", section=name, line=opts["activation"][1])
            if filters < 1 or size < 1 or stride < 1:
                raise CfgError("filters, size and stride must be >= 1", section=name, line=line)
            spec = LayerSpec("convolutional", filters=filters, size=size, stride=stride,
                             pad=pad, batch_normalize=bn, activation=act)
            oh = _out_dim(h, size, stride, spec.padding)
            ow = _out_dim(w, size, stride, spec.padding)
            if oh < 1 or ow < 1:
                raise CfgError(f"kernel {size} larger than padded input {h}x{w}", section=name, line=line)
            c, h, w = filters, oh, ow
        elif kind == "maxpool":
            size = _int(opts, "size", name, line)
            stride = _int(opts, "stride", name, line, size)
            if size < 1 or stride < 1:
                raise CfgError("size and stride must be >= 1", section=name, line=line)
            if size != stride:
                raise CfgError(f"maxpool needs size == stride, got {size} and {stride}",
                               section=name, line=line)
            if h % size or w % size:
                raise CfgError(f"maxpool {size} does not tile input {h}x{w}", section=name, line=line)
            spec = LayerSpec("maxpool", size=size, stride=stride)
            h, w = _out_dim(h, size, stride, 0), _out_dim(w, size, stride, 0)
        else:
            num = _int(opts, "num", name, line)
            classes = _int(opts, "classes", name, line)
            if "anchors" not in opts:
                raise CfgError("missing key 'anchors'", section=name, line=line)
            raw, aline = opts["anchors"]
            try:
                vals = [float(v) for v in raw.split(",") if v.strip()]
            except ValueError:
                raise CfgError(f"bad anchors list {raw!r}", section=name, line=aline) from None
            if num < 1 or classes < 1:
                raise CfgError("num and classes must be >= 1", section=name, line=line)
            if len(vals) != 2 * num or any(v <= 0 for v in vals):
                raise CfgError(f"need {num} positive anchor pairs, got {len(vals)} values",
                               section=name, line=aline)
            if c != num * (5 + classes):
                raise CfgError(f"head expects {num * (5 + classes)} input channels, got {c}",
                               section=name, line=line)
            anchors = tuple((vals[2 * i], vals[2 * i + 1]) for i in range(num))
            spec = LayerSpec("region_head", anchors=anchors, num_anchors=num, classes=classes)
        layers.append(spec)
        shapes.append((c, h, w))

    heads = [i for i, l in enumerate(layers) if l.kind == "region_head"]
    if len(heads) != 1 or heads[0] != len(layers) - 1:
        raise CfgError("network must end in exactly one [region] section")
    return NetworkModel(width, height, channels, tuple(layers), tuple(shapes))


# --------------------------------------------------------------------------
# weights
# --------------------------------------------------------------------------

def conv_float_count(spec: LayerSpec, in_channels: int) -> int:
    per_filter = 4 if spec.batch_normalize else 1
    return spec.filters * per_filter + spec.filters * in_channels * spec.size * spec.size


def _header_size(major, minor):
    return 20 if major * 10 + minor >= 2 else 16


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


def load_weights(model: NetworkModel, data: bytes) -> NetworkModel:
    """Read darknet weights for every conv layer and fold batch norm.

    Returns a new model; the input model is left untouched.
    """
    data = bytes(data)
    if len(data) < 12:
        raise BadHeader(f"weight file is {len(data)} bytes, shorter than the version header")
    major, minor, revision = struct.unpack_from("<iii", data, 0)
    if major < 0 or minor < 0 or revision < 0:
        raise BadHeader(f"negative version numbers {major}.{minor}.{revision}")
    hdr = _header_size(major, minor)
    if len(data) < hdr:
        raise BadHeader(f"weight file is {len(data)} bytes, header needs {hdr}")

    expected = sum(conv_float_count(l, model.input_shape_of(i)[0])
                   for i, l in enumerate(model.layers) if l.kind == "convolutional")
    payload = len(data) - hdr
    if payload % 4 or payload // 4 != expected:
        # partial trailing float counts as missing data
        raise WeightSizeMismatch(expected, payload // 4)
    floats = np.frombuffer(data, dtype="<f4", offset=hdr).astype(np.float32)

    pos = 0
    layers = []
    for i, spec in enumerate(model.layers):
        if spec.kind != "convolutional":
            layers.append(spec)
            continue
        cin = model.input_shape_of(i)[0]
        n = conv_float_count(spec, cin)
        chunk = floats[pos:pos + n]
        bad = np.flatnonzero(~np.isfinite(chunk))
        if bad.size:
            raise NonFiniteWeight(i, int(bad[0]))
        f = spec.filters
        biases = chunk[:f].astype(np.float64)
        k = f
        if spec.batch_normalize:
            scales = chunk[k:k + f].astype(np.float64)
            mean = chunk[k + f:k + 2 * f].astype(np.float64)
            var = chunk[k + 2 * f:k + 3 * f].astype(np.float64)
            k += 3 * f
        w = chunk[k:].astype(np.float64).reshape(f, cin, spec.size, spec.size)
        if spec.batch_normalize:
            with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
                sigma = np.sqrt(var + BN_EPS)
                w = w * (scales / sigma)[:, None, None, None]
                biases = biases - scales * mean / sigma
            broken = ~(np.isfinite(w).all(axis=(1, 2, 3)) & np.isfinite(biases))
            if broken.any():
                # blame the rolling variance of the first filter that folds badly
                raise NonFiniteWeight(i, 3 * f + int(np.flatnonzero(broken)[0]))
        layers.append(dataclasses.replace(spec, weights=_frozen(w), biases=_frozen(biases)))
        pos += n
    return dataclasses.replace(model, layers=tuple(layers), loaded=True)


def pack_weights(model: NetworkModel, params, version=(0, 2, 0), seen=0) -> bytes:
    """Serialise per-conv-layer parameters in darknet order.

    ``params`` holds one dict per convolutional layer with keys
    ``biases``, ``weights`` and, for batch-normalised layers, ``scales``,
    ``mean`` and ``var``.
    """
    major, minor, revision = version
    out = bytearray(struct.pack("<iii", major, minor, revision))
    out += struct.pack("<Q" if _header_size(major, minor) == 20 else "<I", seen)
    convs = [l for l in model.layers if l.kind == "convolutional"]
    if len(params) != len(convs):
        raise ValueError(f"need parameters for {len(convs)} conv layers, got {len(params)}")
    for spec, p in zip(convs, params):
        keys = ("biases", "scales", "mean", "var", "weights") if spec.batch_normalize else ("biases", "weights")
        for key in keys:
            out += np.asarray(p[key], dtype="<f4").ravel().tobytes()
    return bytes(out)


# --------------------------------------------------------------------------
# kernels
# --------------------------------------------------------------------------

def _activate(x, activation):
    if activation == "leaky":
        return np.where(x > 0, x, x * LEAKY_SLOPE)
    return x


def conv_forward(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Cross-correlation via patch-matrix multiplication, then bias and activation."""
    if layer.weights is None:
        raise NotLoaded("convolution weights are not loaded")
    f, cin, k, _ = layer.weights.shape
    if x.ndim != 3 or x.shape[0] != cin:
        raise ShapeMismatch(f"conv expects {cin} input channels, got shape {x.shape}")
    x = np.asarray(x, dtype=np.float32)
    p = layer.padding
    if p:
        x = np.pad(x, ((0, 0), (p, p), (p, p)))
    if x.shape[1] < k or x.shape[2] < k:
        raise ShapeMismatch(f"kernel {k} larger than padded input {x.shape[1:]}")
    s = layer.stride
    if k == 1:
        patches = x[:, ::s, ::s]
        oh, ow = patches.shape[1:]
        cols = patches.reshape(cin, oh * ow)
    else:
        win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
        oh, ow = win.shape[1:3]
        # rows ordered (c, ky, kx) to match the weight layout
        cols = win.transpose(0, 3, 4, 1, 2).reshape(cin * k * k, oh * ow)
    out = layer.weights.reshape(f, cin * k * k) @ cols
    out += layer.biases[:, None]
    return _activate(out.reshape(f, oh, ow), layer.activation)


def maxpool_forward(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    s = layer.size
    if layer.stride != s:
        raise ShapeMismatch(f"maxpool needs size == stride, got {s} and {layer.stride}")
    c, h, w = x.shape
    if h % s or w % s:
        raise ShapeMismatch(f"maxpool {s} does not tile input {h}x{w}")
    return x.reshape(c, h // s, s, w // s, s).max(axis=(2, 4))


def forward(model: NetworkModel, x: np.ndarray) -> np.ndarray:
    """Run the chain; returns the raw tensor fed to the region head."""
    if not model.loaded:
        raise NotLoaded("load_weights has not been applied to this model")
    x = np.asarray(x, dtype=np.float32)
    if x.shape != model.input_shape:
        raise ShapeMismatch(f"input shape {x.shape} != model input {model.input_shape}")
    for layer in model.layers:
        if layer.kind == "convolutional":
            x = conv_forward(x, layer)
        elif layer.kind == "maxpool":
            x = maxpool_forward(x, layer)
    return x
