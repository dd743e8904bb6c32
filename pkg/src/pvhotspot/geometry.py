"""Box arithmetic: IoU, per-class greedy NMS, letterbox un-mapping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES = ("single_cell_hotspot", "multi_cell_hotspot", "module_hotspot")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left origin, covering [x, x+w) x [y, y+h)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size ({self.w}, {self.h})")

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, w, h)

    def scaled(self, sx, sy=None):
        sy = sx if sy is None else sy
        return BBox(self.x * sx, self.y * sy, self.w * sx, self.h * sy)


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    class_id: int
    score: float
    class_name: str = ""

    def __post_init__(self):
        if not 0 <= self.class_id < len(CLASS_NAMES):
            raise ValueError(f"class_id {self.class_id} outside [0, {len(CLASS_NAMES)})")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        expected = CLASS_NAMES[self.class_id]
        if not self.class_name:
            object.__setattr__(self, "class_name", expected)
        elif self.class_name != expected:
            raise ValueError(f"class_name {self.class_name!r} does not match id {self.class_id}")


def _overlap(p0, pl, q0, ql):
    # measured from the offset between starts so identical spans overlap exactly
    d = q0 - p0
    if d >= 0:
        return max(min(pl - d, ql), 0.0)
    return max(min(ql + d, pl), 0.0)


def iou(a: BBox, b: BBox) -> float:
    inter = _overlap(a.x, a.w, b.x, b.w) * _overlap(a.y, a.h, b.y, b.h)
    union = a.w * a.h + b.w * b.h - inter
    if union <= 0:
        return 0.0
    return inter / union


def _overlap_many(p0, pl, q0, ql):
    d = q0 - p0
    return np.maximum(np.where(d >= 0, np.minimum(pl - d, ql), np.minimum(ql + d, pl)), 0.0)


def _iou_one_to_many(i, boxes, areas, idx):
    b = boxes[idx]
    inter = (_overlap_many(boxes[i, 0], boxes[i, 2], b[:, 0], b[:, 2])
             * _overlap_many(boxes[i, 1], boxes[i, 3], b[:, 1], b[:, 3]))
    union = areas[i] + areas[idx] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


# classes up to this size get a full pairwise IoU matrix (8 MB at the limit)
_MATRIX_LIMIT = 1024


def _greedy_matrix(members, boxes, areas, iou_threshold):
    b = boxes[members]
    a = areas[members]
    inter = (_overlap_many(b[:, None, 0], b[:, None, 2], b[None, :, 0], b[None, :, 2])
             * _overlap_many(b[:, None, 1], b[:, None, 3], b[None, :, 1], b[None, :, 3]))
    union = a[:, None] + a[None, :] - inter
    ov = np.zeros_like(inter)
    np.divide(inter, union, out=ov, where=union > 0)
    hits = ov >= iou_threshold
    dropped = np.zeros(len(members), dtype=bool)
    kept = []
    for r in range(len(members)):
        if dropped[r]:
            continue
        kept.append(members[r])
        dropped |= hits[r]
    return kept


def nms(dets, iou_threshold: float):
    """Per-class greedy non-maximum suppression.

    Boxes with IoU >= ``iou_threshold`` against a kept box of the same
    class are dropped.  Score ties break by input position; the result
    is ordered by descending score, then input position.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in [0, 1]")
    dets = list(dets)
    if not dets:
        return []
    n = len(dets)
    boxes = np.array([(d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h) for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    areas = boxes[:, 2] * boxes[:, 3]

    # lexsort: last key is primary
    order = np.lexsort((np.arange(n), -scores))
    keep = []
    for cls in np.unique(classes):
        members = order[classes[order] == cls]
        if members.size <= _MATRIX_LIMIT:
            keep.extend(_greedy_matrix(members, boxes, areas, iou_threshold))
            continue
        remaining = members
        while remaining.size:
            i = remaining[0]
            keep.append(i)
            rest = remaining[1:]
            ov = _iou_one_to_many(i, boxes, areas, rest)
            remaining = rest[ov < iou_threshold]
    keep = np.array(keep)
    keep = keep[np.lexsort((keep, -scores[keep]))]
    return [dets[i] for i in keep]


def map_box_to_original(box: BBox, t) -> BBox:
    """Undo a letterbox transform and clip to the source image."""
    x, w = _clip_span((box.x - t.offset_x) / t.scale, box.w / t.scale, t.src_width)
    y, h = _clip_span((box.y - t.offset_y) / t.scale, box.h / t.scale, t.src_height)
    return BBox(x, y, w, h)


def _clip_span(start, length, limit):
    end = start + length
    if start >= 0 and end <= limit:
        return start, length
    start = min(max(start, 0.0), limit)
    end = min(max(end, 0.0), limit)
    return start, end - start
