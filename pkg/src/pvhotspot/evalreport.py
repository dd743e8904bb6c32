"""Detector scoring (VOC-style matching, all-point AP) and defect reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from pvhotspot.dataset import NUM_CLASSES, AnnotationSet
from pvhotspot.errors import DuplicateImageId
from pvhotspot.geometry import CLASS_NAMES, iou


@dataclass(frozen=True)
class MatchRecord:
    image_id: str
    class_id: int
    score: float
    is_tp: bool
    matched_truth_index: int | None = None

    def __post_init__(self):
        if self.is_tp and self.matched_truth_index is None:
            raise ValueError("a true positive must name its matched truth")


@dataclass
class EvalResult:
    per_class_ap: list
    mean_ap: float
    pr_points: dict = field(default_factory=dict)
    # class -> (n_truth, n_tp, n_fp)
    counts: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "per_class_ap": list(self.per_class_ap),
            "map": self.mean_ap,
            "counts": {
                CLASS_NAMES[c]: {"n_truth": t, "n_tp": tp, "n_fp": fp}
                for c, (t, tp, fp) in sorted(self.counts.items())
            },
            "pr": {CLASS_NAMES[c]: [list(p) for p in pts] for c, pts in sorted(self.pr_points.items())},
        }

    def pr_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["class", "recall", "precision"])
        for c, pts in sorted(self.pr_points.items()):
            for r, p in pts:
                writer.writerow([CLASS_NAMES[c], r, p])
        return buf.getvalue()


@dataclass(frozen=True)
class ReportConfig:
    per_class_power_loss_watts: tuple
    homes_equivalent_watts: float

    def __post_init__(self):
        losses = tuple(float(v) for v in self.per_class_power_loss_watts)
        object.__setattr__(self, "per_class_power_loss_watts", losses)
        if len(losses) != NUM_CLASSES:
            raise ValueError(f"need {NUM_CLASSES} per-class loss values, got {len(losses)}")
        if any(not math.isfinite(v) or v < 0 for v in losses):
            raise ValueError("per-class losses must be finite and >= 0")
        h = float(self.homes_equivalent_watts)
        if not math.isfinite(h) or h <= 0:
            raise ValueError("homes_equivalent_watts must be finite and > 0")

    @classmethod
    def from_json(cls, doc: dict) -> "ReportConfig":
        return cls(tuple(doc["per_class_power_loss_watts"]), doc["homes_equivalent_watts"])

    def to_json(self) -> dict:
        return {
            "per_class_power_loss_watts": list(self.per_class_power_loss_watts),
            "homes_equivalent_watts": self.homes_equivalent_watts,
        }


def match_detections(dets, truths: AnnotationSet, iou_threshold: float = 0.5):
    """Greedy per-class matching in descending score order.

    A detection is a true positive when the unmatched truth of its class
    with the highest IoU overlaps it by at least ``iou_threshold``.
    Records come back grouped by class, each group in processing order.
    """
    truth_boxes = truths.boxes()
    truth_cls = [a.class_id for a in truths.items]
    records = []
    dets = list(dets)
    for cls in sorted({d.class_id for d in dets}):
        pool = [k for k, c in enumerate(truth_cls) if c == cls]
        taken = set()
        order = sorted((k for k, d in enumerate(dets) if d.class_id == cls),
                       key=lambda k: (-dets[k].score, k))
        for k in order:
            d = dets[k]
            best, best_iou = None, -1.0
            for t in pool:
                if t in taken:
                    continue
                ov = iou(d.bbox, truth_boxes[t])
                if ov > best_iou:
                    best, best_iou = t, ov
            if best is not None and best_iou >= iou_threshold:
                taken.add(best)
                records.append(MatchRecord(truths.image_id, cls, d.score, True, best))
            else:
                records.append(MatchRecord(truths.image_id, cls, d.score, False))
    return records


def _pr_curve(records, n_truth):
    recs = sorted(records, key=lambda r: -r.score)
    tp = np.cumsum([r.is_tp for r in recs], dtype=np.float64)
    fp = np.cumsum([not r.is_tp for r in recs], dtype=np.float64)
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / n_truth if n_truth else np.zeros_like(tp)
    return recall, precision


def average_precision(records, n_truth: int) -> float:
    """All-point interpolated AP: area under the monotone precision envelope.

    Records are ranked by descending score (stable).  With no truths, AP
    is 1 if there are also no false positives, else 0.
    """
    records = list(records)
    if n_truth == 0:
        return 0.0 if any(not r.is_tp for r in records) else 1.0
    if not records:
        return 0.0
    recall, precision = _pr_curve(records, n_truth)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def _as_pairs(items, key):
    if isinstance(items, dict):
        return list(items.items())
    out = []
    for it in items:
        out.append((it.image_id, it) if key else tuple(it))
    return out


def evaluate(detections, truths, iou_threshold: float = 0.5) -> EvalResult:
    """Pool matches over images and score each hotspot class.

    ``detections`` maps image id to a detection list (dict, or sequence of
    ``(image_id, dets)`` pairs); ``truths`` is a dict or sequence of
    AnnotationSets.  Images without annotations have zero truths.
    """
    det_pairs = _as_pairs(detections, key=False)
    truth_pairs = _as_pairs(truths, key=True)
    for what, pairs in (("detections", det_pairs), ("annotations", truth_pairs)):
        ids = [i for i, _ in pairs]
        if len(ids) != len(set(ids)):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateImageId(f"image id repeated in {what}: {dup[0]}")
    det_map = dict(det_pairs)
    truth_map = dict(truth_pairs)

    pooled = {c: [] for c in range(NUM_CLASSES)}
    n_truth = dict.fromkeys(range(NUM_CLASSES), 0)
    for image_id in sorted(set(det_map) | set(truth_map)):
        ann = truth_map.get(image_id) or AnnotationSet(image_id, 1, 1)
        for a in ann.items:
            n_truth[a.class_id] += 1
        for rec in match_detections(det_map.get(image_id, []), ann, iou_threshold):
            pooled[rec.class_id].append(rec)

    per_class, pr, counts = [], {}, {}
    for c in range(NUM_CLASSES):
        # image id breaks score ties so results do not depend on input order
        recs = sorted(pooled[c], key=lambda r: (-r.score, r.image_id))
        per_class.append(average_precision(recs, n_truth[c]))
        n_tp = sum(r.is_tp for r in recs)
        counts[c] = (n_truth[c], n_tp, len(recs) - n_tp)
        if recs and n_truth[c]:
            recall, precision = _pr_curve(recs, n_truth[c])
            pr[c] = [(float(r), float(p)) for r, p in zip(recall, precision)]
        else:
            pr[c] = []
    return EvalResult(per_class, float(np.mean(per_class)), pr, counts)


def build_report(detections, config: ReportConfig) -> dict:
    """Per-image and total defect counts with a config-driven power-loss estimate."""
    pairs = _as_pairs(detections, key=False)
    losses = config.per_class_power_loss_watts
    images = {}
    totals = [0] * NUM_CLASSES
    for image_id, dets in sorted(pairs, key=lambda p: p[0]):
        counts = [0] * NUM_CLASSES
        for d in dets:
            counts[d.class_id] += 1
        for c in range(NUM_CLASSES):
            totals[c] += counts[c]
        images[image_id] = {
            "counts": dict(zip(CLASS_NAMES, counts)),
            "estimated_loss_watts": sum(n * w for n, w in zip(counts, losses)),
        }
    loss = sum(n * w for n, w in zip(totals, losses))
    return {
        "images": images,
        "totals": dict(zip(CLASS_NAMES, totals)),
        "estimated_loss_watts": loss,
        "homes_equivalent": round(loss / config.homes_equivalent_watts, 2),
        "config": config.to_json(),
    }
