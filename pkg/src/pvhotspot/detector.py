"""From raw network output (or raw pixels) to hotspot detections."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from pvhotspot.errors import ShapeMismatch, SlotCollision
from pvhotspot.geometry import BBox, Detection, map_box_to_original, nms
from pvhotspot.inference import NetworkModel, forward
from pvhotspot.thermal_io import ThermalFrame, contrast_stretch, letterbox

DEFAULT_CONF = 0.25
DEFAULT_NMS = 0.45
EMPTY_SLOT_LOGIT = -20.0
TARGET_CLASS_LOGIT = 10.0
# sigmoid(t) < 1 for every finite t; float rounding must not reach it
_MAX_SCORE = float(np.nextafter(1.0, 0.0))

# baseline classifier cutoffs
SINGLE_CELL_MAX_CELLS = 1.5
MULTI_CELL_MAX_MODULE_FRACTION = 0.5


@dataclass(frozen=True)
class HeadParams:
    S_w: int
    S_h: int
    B: int
    C: int
    anchors: tuple  # (p_w, p_h) pairs in grid units
    conf_threshold: float = DEFAULT_CONF
    nms_threshold: float = DEFAULT_NMS

    def __post_init__(self):
        anchors = getattr(self.anchors, "anchors", self.anchors)
        object.__setattr__(self, "anchors", tuple((float(w), float(h)) for w, h in anchors))
        if len(self.anchors) != self.B:
            raise ValueError(f"{len(self.anchors)} anchors given for B={self.B}")
        if not (0 <= self.conf_threshold <= 1 and 0 <= self.nms_threshold <= 1):
            raise ValueError("thresholds must lie in [0, 1]")

    @property
    def channels(self) -> int:
        return self.B * (5 + self.C)

    @classmethod
    def from_model(cls, model: NetworkModel, conf_threshold=DEFAULT_CONF, nms_threshold=DEFAULT_NMS):
        head = model.head
        c, h, w = model.shapes[-1]
        return cls(w, h, head.num_anchors, head.classes, head.anchors, conf_threshold, nms_threshold)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def head_scores(raw: np.ndarray, params: HeadParams):
    """Decode every slot.  Returns (boxes, scores) with boxes shaped
    (S_h, S_w, B, 4) as normalized (cx, cy, w, h) and scores (S_h, S_w, B, C)."""
    expected = (params.channels, params.S_h, params.S_w)
    if raw.shape != expected:
        raise ShapeMismatch(f"head tensor has shape {raw.shape}, expected {expected}")
    t = np.asarray(raw, dtype=np.float64).reshape(params.B, 5 + params.C, params.S_h, params.S_w)
    t = t.transpose(2, 3, 0, 1)  # (S_h, S_w, B, fields)
    anchors = np.array(params.anchors)
    cols = np.arange(params.S_w)[None, :, None]
    rows = np.arange(params.S_h)[:, None, None]
    bx = (_sigmoid(t[..., 0]) + cols) / params.S_w
    by = (_sigmoid(t[..., 1]) + rows) / params.S_h
    bw = anchors[:, 0] * np.exp(t[..., 2]) / params.S_w
    bh = anchors[:, 1] * np.exp(t[..., 3]) / params.S_h
    obj = _sigmoid(t[..., 4])
    probs = _softmax(t[..., 5:], axis=-1)
    scores = np.minimum(obj[..., None] * probs, _MAX_SCORE)
    return np.stack([bx, by, bw, bh], axis=-1), scores


def decode_head(raw: np.ndarray, params: HeadParams):
    """Emit one normalized-coordinate Detection per (cell, anchor, class)
    whose score reaches ``conf_threshold``.  No suppression is applied."""
    boxes, scores = head_scores(raw, params)
    out = []
    for i, j, a, c in zip(*np.nonzero(scores >= params.conf_threshold)):
        cx, cy, w, h = boxes[i, j, a]
        out.append(Detection(BBox.from_center(cx, cy, w, h), int(c), float(scores[i, j, a, c])))
    return out


def _best_anchor(w_grid, h_grid, anchors):
    a = np.asarray(anchors)
    inter = np.minimum(w_grid, a[:, 0]) * np.minimum(h_grid, a[:, 1])
    iou = inter / (w_grid * h_grid + a[:, 0] * a[:, 1] - inter)
    return int(np.argmax(iou))


def _logit(p):
    p = min(max(p, 1e-12), 1 - 1e-12)
    return float(np.log(p / (1 - p)))


def encode_head(dets, params: HeadParams) -> np.ndarray:
    """Inverse of decode_head for ``(class_id, b_x, b_y, b_w, b_h, objectness)`` tuples.

    Each box goes to the cell holding its center and the anchor with the
    best shape IoU.
    """
    t = np.zeros((params.B, 5 + params.C, params.S_h, params.S_w), dtype=np.float64)
    t[:, 4] = EMPTY_SLOT_LOGIT
    taken = {}
    for n, (cls, bx, by, bw, bh, objectness) in enumerate(dets):
        if not 0 < objectness < 1 or bw <= 0 or bh <= 0:
            raise ValueError(f"box {n}: objectness must be in (0, 1) and sizes positive")
        j = min(int(np.floor(bx * params.S_w)), params.S_w - 1)
        i = min(int(np.floor(by * params.S_h)), params.S_h - 1)
        a = _best_anchor(bw * params.S_w, bh * params.S_h, params.anchors)
        if (i, j, a) in taken:
            raise SlotCollision(f"boxes {taken[(i, j, a)]} and {n} share cell ({i}, {j}) anchor {a}")
        taken[(i, j, a)] = n
        pw, ph = params.anchors[a]
        t[a, 0, i, j] = _logit(bx * params.S_w - j)
        t[a, 1, i, j] = _logit(by * params.S_h - i)
        t[a, 2, i, j] = np.log(bw * params.S_w / pw)
        t[a, 3, i, j] = np.log(bh * params.S_h / ph)
        t[a, 4, i, j] = _logit(objectness)
        t[a, 5 + cls, i, j] = TARGET_CLASS_LOGIT
    return t.reshape(params.channels, params.S_h, params.S_w).astype(np.float32)


def sort_detections(dets):
    return sorted(dets, key=lambda d: (-d.score, d.class_id, d.bbox.x))


def detect_image(model: NetworkModel, frame: ThermalFrame, params: HeadParams, stretch=(2.0, 98.0)):
    """Full pipeline on one frame; boxes come back in frame pixel coordinates."""
    if model.input_channels != 1:
        raise ShapeMismatch(f"model takes {model.input_channels} channels, frames have 1")
    gray = contrast_stretch(frame, *stretch)
    boxed, transform = letterbox(gray, model.input_width, model.input_height)
    x = (boxed.pixels.astype(np.float32) / np.float32(255.0))[None]
    raw = forward(model, x)
    dets = [
        Detection(d.bbox.scaled(model.input_width, model.input_height), d.class_id, d.score)
        for d in decode_head(raw, params)
    ]
    kept = nms(dets, params.nms_threshold)
    out = []
    for d in kept:
        box = map_box_to_original(d.bbox, transform)
        # boxes lying wholly in the letterbox padding collapse to nothing
        if box.w > 0 and box.h > 0:
            out.append(Detection(box, d.class_id, d.score))
    return sort_detections(out)


def baseline_detect(frame: ThermalFrame, base_estimate: float, delta_threshold: float,
                    cell_px: int, cells_x: int = 6, cells_y: int = 10):
    """Threshold-and-label hotspot finder that needs no network.

    Pixels above ``base_estimate + delta_threshold`` are grouped into
    4-connected components.  Component pixel count decides the class:
    up to 1.5 cells is a single-cell hotspot, up to half a module a
    multi-cell hotspot, anything bigger a module hotspot.  Sun glare is
    indistinguishable from a hotspot here.
    """
    if not delta_threshold > 0:
        raise ValueError("delta_threshold must be positive")
    if cell_px < 1:
        raise ValueError("cell_px must be >= 1")
    px = frame.pixels.astype(np.float64)
    mask = px > base_estimate + delta_threshold
    labels, n = ndimage.label(mask)
    if n == 0:
        return []
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1)
    excess = np.bincount(flat, weights=(px - base_estimate).ravel(), minlength=n + 1)
    cell_area = cell_px * cell_px
    module_area = cells_x * cells_y * cell_area
    out = []
    for k, sl in enumerate(ndimage.find_objects(labels), start=1):
        ys, xs = sl
        area = counts[k]
        if area <= SINGLE_CELL_MAX_CELLS * cell_area:
            cls = 0
        elif area <= MULTI_CELL_MAX_MODULE_FRACTION * module_area:
            cls = 1
        else:
            cls = 2
        score = min(1.0, excess[k] / area / (2 * delta_threshold))
        box = BBox(xs.start, ys.start, xs.stop - xs.start, ys.stop - ys.start)
        out.append(Detection(box, cls, float(score)))
    return sort_detections(out)


# --------------------------------------------------------------------------
# JSON
# --------------------------------------------------------------------------

def detections_to_json(image: str, width: int, height: int, dets) -> dict:
    return {
        "image": image,
        "width": width,
        "height": height,
        "detections": [
            {
                "class_id": d.class_id,
                "class_name": d.class_name,
                "score": round(d.score, 6),
                "bbox": {"x": d.bbox.x, "y": d.bbox.y, "w": d.bbox.w, "h": d.bbox.h},
            }
            for d in sort_detections(dets)
        ],
    }


def detections_from_json(doc: dict):
    dets = [
        Detection(BBox(float(d["bbox"]["x"]), float(d["bbox"]["y"]),
                       float(d["bbox"]["w"]), float(d["bbox"]["h"])),
                  int(d["class_id"]), float(d["score"]), d.get("class_name", ""))
        for d in doc["detections"]
    ]
    return doc["image"], int(doc["width"]), int(doc["height"]), dets
