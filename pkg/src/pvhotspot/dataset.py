"""Ground truth: annotation files, splitting, augmentation, anchor fitting, synthetic scenes.

All randomness goes through ``numpy.random.default_rng(seed)`` (PCG64)
created locally in each call, so every function here is pure given its
seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from pvhotspot.errors import DimensionMismatch, InsufficientDistinctBoxes, ParseError
from pvhotspot.geometry import BBox, CLASS_NAMES
from pvhotspot.thermal_io import ThermalFrame, round_half_up

NUM_CLASSES = len(CLASS_NAMES)
BOX_EPS = 1e-6
MODULE_GAP_PX = 2
MAX_KMEANS_ITER = 100
DEFAULT_KMEANS_RESTARTS = 5


@dataclass(frozen=True)
class Annotation:
    """One ground-truth box, normalized center format."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        problem = _annotation_problem(self.class_id, self.cx, self.cy, self.w, self.h)
        if problem:
            raise ValueError(problem[1])

    def to_bbox(self, image_width, image_height) -> BBox:
        return BBox(
            (self.cx - self.w / 2) * image_width,
            (self.cy - self.h / 2) * image_height,
            self.w * image_width,
            self.h * image_height,
        )


def _annotation_problem(class_id, cx, cy, w, h):
    """Return (field, message) for the first invariant violated, else None."""
    if class_id not in range(NUM_CLASSES):
        return "class", f"class {class_id} not in {{0, 1, 2}}"
    for name, v in (("cx", cx), ("cy", cy), ("w", w), ("h", h)):
        if not math.isfinite(v):
            return name, f"{name} is not finite"
    if not 0 < w <= 1:
        return "w", f"width {w} outside (0, 1]"
    if not 0 < h <= 1:
        return "h", f"height {h} outside (0, 1]"
    if cx - w / 2 < -BOX_EPS or cx + w / 2 > 1 + BOX_EPS:
        return "cx", f"box spans x in [{cx - w / 2}, {cx + w / 2}], outside the unit square"
    if cy - h / 2 < -BOX_EPS or cy + h / 2 > 1 + BOX_EPS:
        return "cy", f"box spans y in [{cy - h / 2}, {cy + h / 2}], outside the unit square"
    return None


@dataclass(frozen=True)
class AnnotationSet:
    image_id: str
    image_width: int
    image_height: int
    items: tuple = ()

    def __post_init__(self):
        if self.image_width < 1 or self.image_height < 1:
            raise ValueError("image dimensions must be >= 1")
        object.__setattr__(self, "items", tuple(self.items))

    def boxes(self):
        """Pixel-space boxes, one per item."""
        return [a.to_bbox(self.image_width, self.image_height) for a in self.items]


def parse_annotations(text: str, image_id: str, image_width: int, image_height: int) -> AnnotationSet:
    """Parse darknet-style "class cx cy w h" lines (normalized)."""
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise ParseError(f"expected 5 fields, got {len(fields)}", line=lineno)
        try:
            class_id = int(fields[0])
        except ValueError:
            raise ParseError(f"class field {fields[0]!r} is not an integer",
                             line=lineno, field="class") from None
        values = []
        for name, tok in zip(("cx", "cy", "w", "h"), fields[1:]):
            try:
                values.append(float(tok))
            except ValueError:
                raise ParseError(f"{name} field {tok!r} is not a number",
                                 line=lineno, field=name) from None
        problem = _annotation_problem(class_id, *values)
        if problem:
            fld, msg = problem
            raise ParseError(f"{fld} field: {msg}", line=lineno, field=fld)
        items.append(Annotation(class_id, *values))
    return AnnotationSet(image_id, image_width, image_height, tuple(items))


def serialize_annotations(ann: AnnotationSet) -> str:
    return "".join(
        f"{a.class_id} {a.cx:.6f} {a.cy:.6f} {a.w:.6f} {a.h:.6f}\n" for a in ann.items
    )


def read_manifest(path):
    """Read ``image_path<TAB>annotation_path`` lines; relative paths resolve
    against the manifest's directory.  The annotation column may be empty."""
    path = Path(path)
    base = path.parent
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) > 2:
            raise ParseError("expected image_path<TAB>annotation_path", line=lineno)
        image = base / parts[0].strip()
        ann = base / parts[1].strip() if len(parts) == 2 and parts[1].strip() else None
        entries.append((image, ann))
    return entries


def split_dataset(ids, test_fraction: float, seed: int):
    """Seeded shuffle, then the first round(n * test_fraction) ids form the test set."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    ids = list(ids)
    n_test = int(round_half_up(len(ids) * test_fraction))
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = [ids[i] for i in perm[:n_test]]
    train = [ids[i] for i in perm[n_test:]]
    return train, test


def hflip_augment(frame: ThermalFrame, ann: AnnotationSet):
    if (frame.width, frame.height) != (ann.image_width, ann.image_height):
        raise DimensionMismatch(
            f"frame is {frame.width}x{frame.height}, annotations are for "
            f"{ann.image_width}x{ann.image_height}"
        )
    flipped = ThermalFrame(frame.pixels[:, ::-1].copy())
    items = tuple(Annotation(a.class_id, 1.0 - a.cx, a.cy, a.w, a.h) for a in ann.items)
    return flipped, AnnotationSet(ann.image_id, ann.image_width, ann.image_height, items)


def intensity_jitter(frame: ThermalFrame, gain: float, bias: float, seed: int = 0) -> ThermalFrame:
    """Affine gain/bias on radiometric counts, rounded half-up and clamped to 16 bits.

    ``seed`` is accepted for interface stability; fixed gain/bias make
    the operation deterministic without it.
    """
    if not gain > 0:
        raise ValueError("gain must be positive")
    v = frame.pixels.astype(np.float64) * gain + bias
    return ThermalFrame(np.clip(round_half_up(v), 0, 65535).astype(np.uint16))


# --------------------------------------------------------------------------
# Anchors
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorSet:
    """Anchor sizes in feature-grid units, area ascending."""

    anchors: tuple
    mean_best_iou: float
    trace: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not self.anchors:
            raise ValueError("anchor set is empty")
        if any(w <= 0 or h <= 0 for w, h in self.anchors):
            raise ValueError("anchor dimensions must be positive")


def shape_iou(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU of (w, h) sizes co-centered at the origin; shape (n_boxes, n_anchors)."""
    inter = (np.minimum(boxes[:, None, 0], anchors[None, :, 0])
             * np.minimum(boxes[:, None, 1], anchors[None, :, 1]))
    union = (boxes[:, 0] * boxes[:, 1])[:, None] + (anchors[:, 0] * anchors[:, 1])[None, :] - inter
    return inter / union


def _assign(boxes, anchors):
    dist = 1.0 - shape_iou(boxes, anchors)
    assign = np.argmin(dist, axis=1)  # first minimum -> lower anchor index
    return assign, float(dist[np.arange(len(boxes)), assign].mean())


def _lloyd(boxes, anchors):
    k = len(anchors)
    assign, obj = _assign(boxes, anchors)
    trace = [obj]
    for _ in range(MAX_KMEANS_ITER):
        updated = anchors.copy()
        for j in range(k):
            members = boxes[assign == j]
            if len(members):
                updated[j] = members.mean(axis=0)
        new_assign, new_obj = _assign(boxes, updated)
        if new_obj > obj:
            break
        anchors, obj = updated, new_obj
        trace.append(obj)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return anchors, trace


def _fit_anchors(boxes, distinct, k, seed, n_init):
    rng = np.random.default_rng(seed)
    candidates = [distinct[np.sort(rng.choice(len(distinct), size=k, replace=False))]
                  for _ in range(n_init)]
    if k > 1:
        # warm start: the k-1 solution plus the worst-covered box; since
        # _lloyd never raises the objective, more anchors never fit worse
        prev, _ = _fit_anchors(boxes, distinct, k - 1, seed, n_init)
        worst = np.argmin(shape_iou(boxes, prev).max(axis=1))
        candidates.append(np.vstack([prev, boxes[worst]]))
    best = None
    for init in candidates:
        anchors, trace = _lloyd(boxes, init)
        if best is None or trace[-1] < best[1][-1]:
            best = (anchors, trace)
    return best


def kmeans_anchors(boxes, k: int, grid_w: int, grid_h: int, seed: int,
                   n_init: int = DEFAULT_KMEANS_RESTARTS) -> AnchorSet:
    """Cluster normalized (w, h) box sizes with a 1 - IoU distance.

    Centroids are member means.  Iteration stops when assignments are
    stable, after 100 rounds, or when a mean update would raise the mean
    distance, so the objective in ``trace`` never increases.

    ``n_init`` initialisations of k distinct boxes are drawn from the
    seeded generator; for k > 1 the (k-1)-anchor solution extended by the
    worst-covered box is tried too.  The lowest final objective wins
    (earliest candidate on ties).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if k < 1 or n_init < 1:
        raise ValueError("k and n_init must be >= 1")
    if len(boxes) == 0:
        raise InsufficientDistinctBoxes("no boxes given")
    if np.any(boxes <= 0):
        raise ValueError("box sizes must be positive")
    distinct = np.unique(boxes, axis=0)
    if len(distinct) < k:
        raise InsufficientDistinctBoxes(f"{len(distinct)} distinct box sizes, need k={k}")

    anchors, trace = _fit_anchors(boxes, distinct, k, seed, n_init)
    mean_best = float(shape_iou(boxes, anchors).max(axis=1).mean())
    order = np.argsort(anchors[:, 0] * anchors[:, 1], kind="stable")
    scaled = tuple((float(w * grid_w), float(h * grid_h)) for w, h in anchors[order])
    return AnchorSet(scaled, mean_best, tuple(trace))


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Glare:
    center_x: float
    center_y: float
    radius_px: float
    delta_counts: int


@dataclass(frozen=True)
class SynthParams:
    """Module-grid scene description.  ``defects`` holds
    ``(class_id, module_row, module_col, cell_row, cell_col)`` tuples."""

    modules_x: int = 3
    modules_y: int = 2
    cells_x: int = 6
    cells_y: int = 10
    cell_px: int = 6
    base_counts: int = 20000
    noise_sigma: float = 0.0
    hotspot_delta: int = 2000
    defects: tuple = ()
    glare: Glare | None = None
    seed: int = 0
    image_id: str = "synth"

    def __post_init__(self):
        object.__setattr__(self, "defects", tuple(tuple(d) for d in self.defects))
        for name in ("modules_x", "modules_y", "cells_x", "cells_y", "cell_px"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hotspot_delta <= 0:
            raise ValueError("hotspot_delta must be positive")
        if self.base_counts < 0 or self.base_counts + self.hotspot_delta > 65535:
            raise ValueError("base_counts + hotspot_delta must fit in 16 bits")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        for d in self.defects:
            cls, mr, mc, cr, cc = d
            if cls not in range(NUM_CLASSES):
                raise ValueError(f"defect class {cls} invalid")
            if not (0 <= mr < self.modules_y and 0 <= mc < self.modules_x):
                raise ValueError(f"defect module ({mr}, {mc}) outside grid")
            if not (0 <= cr < self.cells_y and 0 <= cc < self.cells_x):
                raise ValueError(f"defect cell ({cr}, {cc}) outside module")
            if cls == 1 and max(self.cells_x, self.cells_y) < 2:
                raise ValueError("multi-cell defects need modules of at least 2 cells")

    @property
    def module_w(self) -> int:
        return self.cells_x * self.cell_px

    @property
    def module_h(self) -> int:
        return self.cells_y * self.cell_px

    @property
    def width(self) -> int:
        return self.modules_x * self.module_w + (self.modules_x + 1) * MODULE_GAP_PX

    @property
    def height(self) -> int:
        return self.modules_y * self.module_h + (self.modules_y + 1) * MODULE_GAP_PX

    def module_origin(self, row, col):
        return (MODULE_GAP_PX + col * (self.module_w + MODULE_GAP_PX),
                MODULE_GAP_PX + row * (self.module_h + MODULE_GAP_PX))


def _multi_cell_run(rng, p: SynthParams, cell_row, cell_col):
    """Pick a 2-4 cell straight run inside one module; returns (row0, col0, rows, cols)."""
    n = int(rng.integers(2, 5))
    horizontal = bool(rng.integers(0, 2))
    if horizontal and p.cells_x < 2:
        horizontal = False
    if not horizontal and p.cells_y < 2:
        horizontal = True
    span = p.cells_x if horizontal else p.cells_y
    n = min(n, span)
    if horizontal:
        c0 = min(cell_col, p.cells_x - n)
        return cell_row, c0, 1, n
    r0 = min(cell_row, p.cells_y - n)
    return r0, cell_col, n, 1


def synth_scene(params: SynthParams):
    """Render a module grid with injected hotspots.  Returns ``(ThermalFrame, AnnotationSet)``."""
    p = params
    rng = np.random.default_rng(p.seed)
    gap_counts = p.base_counts // 2
    img = np.full((p.height, p.width), float(gap_counts))
    for r in range(p.modules_y):
        for c in range(p.modules_x):
            x0, y0 = p.module_origin(r, c)
            img[y0:y0 + p.module_h, x0:x0 + p.module_w] = p.base_counts

    items = []
    for cls, mr, mc, cr, cc in p.defects:
        mx, my = p.module_origin(mr, mc)
        if cls == 0:
            x, y, w, h = mx + cc * p.cell_px, my + cr * p.cell_px, p.cell_px, p.cell_px
        elif cls == 1:
            r0, c0, nr, nc = _multi_cell_run(rng, p, cr, cc)
            x, y = mx + c0 * p.cell_px, my + r0 * p.cell_px
            w, h = nc * p.cell_px, nr * p.cell_px
        else:
            x, y, w, h = mx, my, p.module_w, p.module_h
        img[y:y + h, x:x + w] += p.hotspot_delta
        items.append(Annotation(cls, (x + w / 2) / p.width, (y + h / 2) / p.height,
                                w / p.width, h / p.height))

    if p.glare is not None:
        g = p.glare
        yy, xx = np.mgrid[0:p.height, 0:p.width]
        disk = (xx + 0.5 - g.center_x) ** 2 + (yy + 0.5 - g.center_y) ** 2 <= g.radius_px ** 2
        img[disk] += g.delta_counts

    if p.noise_sigma > 0:
        img += rng.normal(0.0, p.noise_sigma, size=img.shape)
    pixels = np.clip(round_half_up(img), 0, 65535).astype(np.uint16)
    return ThermalFrame(pixels), AnnotationSet(p.image_id, p.width, p.height, tuple(items))


def random_scene_params(seed: int, *, modules_x=3, modules_y=2, cell_px=6,
                        max_defects=None, noise_sigma=0.0, hotspot_delta=2000,
                        base_counts=20000, glare=False, image_id="synth") -> SynthParams:
    """Draw a mixed-defect scene with at most one defect per module.

    One defect per module keeps defects from merging into a single
    thermal blob.  ``glare=True`` adds one unannotated glare disk.
    """
    rng = np.random.default_rng(seed)
    n_modules = modules_x * modules_y
    limit = n_modules if max_defects is None else min(max_defects, n_modules)
    n_defects = int(rng.integers(1, limit + 1)) if limit > 0 else 0
    modules = rng.choice(n_modules, size=n_defects, replace=False)
    probe = SynthParams(modules_x=modules_x, modules_y=modules_y, cell_px=cell_px)
    defects = []
    for m in sorted(int(v) for v in modules):
        cls = int(rng.integers(0, NUM_CLASSES))
        defects.append((cls, m // modules_x, m % modules_x,
                        int(rng.integers(0, probe.cells_y)), int(rng.integers(0, probe.cells_x))))
    g = None
    if glare:
        radius = 1.5 * cell_px
        g = Glare(float(rng.uniform(radius, probe.width - radius)),
                  float(rng.uniform(radius, probe.height - radius)),
                  radius, int(1.5 * hotspot_delta))
    return SynthParams(
        modules_x=modules_x, modules_y=modules_y, cell_px=cell_px,
        base_counts=base_counts, noise_sigma=noise_sigma, hotspot_delta=hotspot_delta,
        defects=tuple(defects), glare=g, seed=int(rng.integers(0, 2**63)),
        image_id=image_id,
    )
