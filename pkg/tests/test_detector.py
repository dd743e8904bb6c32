import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bfs_components, darknet_bytes, iou_xywh, sigmoid
from pvhotspot.detector import (
    HeadParams,
    baseline_detect,
    decode_head,
    detect_image,
    detections_from_json,
    detections_to_json,
    encode_head,
    head_scores,
)
from pvhotspot.errors import ShapeMismatch, SlotCollision
from pvhotspot.geometry import BBox, Detection
from pvhotspot.dataset import Glare, SynthParams, random_scene_params, synth_scene
from pvhotspot.inference import conv_float_count, load_weights, parse_cfg
from pvhotspot.thermal_io import ThermalFrame

ANCHORS = ((0.6, 0.8), (1.5, 1.2), (3.0, 3.5))


def params(S_w=7, S_h=5, anchors=ANCHORS, C=3, conf=0.25):
    return HeadParams(S_w, S_h, len(anchors), C, anchors, conf, 0.45)


# ------------------------------------------------------------------ decode

def test_decode_zero_logits_example():
    p = params(6, 4, anchors=((6 * 0.2, 4 * 0.2),), C=1, conf=0.2)
    dets = decode_head(np.zeros((6, 4, 6), np.float32), p)
    assert len(dets) == 24
    for d in dets:
        cx, cy = d.bbox.x + d.bbox.w / 2, d.bbox.y + d.bbox.h / 2
        j, i = round(cx * 6 - 0.5), round(cy * 4 - 0.5)
        assert cx == pytest.approx((j + 0.5) / 6, abs=1e-12)
        assert cy == pytest.approx((i + 0.5) / 4, abs=1e-12)
        assert (d.bbox.w, d.bbox.h) == pytest.approx((0.2, 0.2), abs=1e-12)
        assert d.score == 0.5 and d.class_id == 0


def test_decode_matches_formulas():
    p = params()
    raw = np.random.default_rng(0).normal(0, 2, size=(p.channels, p.S_h, p.S_w)).astype(np.float32)
    boxes, scores = head_scores(raw, p)
    i, j, a = 3, 2, 1
    t = [float(raw[a * 8 + k, i, j]) for k in range(8)]
    e = np.exp(t[5:])
    probs = e / e.sum()
    assert boxes[i, j, a, 0] == pytest.approx((sigmoid(t[0]) + j) / p.S_w, rel=1e-12)
    assert boxes[i, j, a, 1] == pytest.approx((sigmoid(t[1]) + i) / p.S_h, rel=1e-12)
    assert boxes[i, j, a, 2] == pytest.approx(ANCHORS[a][0] * np.exp(t[2]) / p.S_w, rel=1e-12)
    assert boxes[i, j, a, 3] == pytest.approx(ANCHORS[a][1] * np.exp(t[3]) / p.S_h, rel=1e-12)
    assert scores[i, j, a] == pytest.approx(sigmoid(t[4]) * probs, rel=1e-12)


def test_decode_threshold_one_is_empty():
    p = params(conf=1.0)
    raw = np.full((p.channels, p.S_h, p.S_w), 40.0, np.float32)
    raw[5::8] = 100  # class 0 dominates, objectness saturates
    assert decode_head(raw, p) == []


def test_decode_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        decode_head(np.zeros((10, 5, 7)), params())


@settings(max_examples=40)
@given(st.lists(st.floats(-30, 30), min_size=3, max_size=3))
def test_softmax_sums_to_one(logits):
    p = params(1, 1, anchors=((1, 1),))
    raw = np.zeros((8, 1, 1))
    raw[5:, 0, 0] = logits
    raw[4] = 50
    _, scores = head_scores(raw, p)
    assert scores.sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=40)
@given(st.floats(-15, 14), st.floats(0.01, 5), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_scores_strictly_increase_with_objectness(t_o, step, logits):
    p = params(1, 1, anchors=((1, 1),))
    raw = np.zeros((8, 1, 1))
    raw[5:, 0, 0] = logits
    raw[4] = t_o
    lo = head_scores(raw, p)[1]
    raw[4] = t_o + step
    hi = head_scores(raw, p)[1]
    assert (hi > lo).all()


# ------------------------------------------------------------------ encode

def random_boxes(rng, p, n):
    """n boxes with distinct (cell, best-anchor) slots; one box per cell."""
    cells = rng.choice(p.S_w * p.S_h, size=n, replace=False)
    out = []
    for c in cells:
        i, j = divmod(int(c), p.S_w)
        bx = (j + rng.uniform(0.02, 0.98)) / p.S_w
        by = (i + rng.uniform(0.02, 0.98)) / p.S_h
        out.append((int(rng.integers(0, p.C)), bx, by, rng.uniform(0.02, 0.9),
                    rng.uniform(0.02, 0.9), rng.uniform(0.3, 0.99)))
    return out


def test_encode_empty_decodes_to_nothing():
    p = params()
    assert decode_head(encode_head([], p), p) == []


def test_encode_single_center_box():
    p = params()
    raw = encode_head([(2, 0.5, 0.5, 0.3, 0.4, 0.9)], p)
    dets = decode_head(raw, p)
    assert len(dets) == 1 and dets[0].class_id == 2
    assert dets[0].score == pytest.approx(0.9, abs=1e-4)


def test_encode_decode_round_trip_50():
    p = params(10, 10)
    rng = np.random.default_rng(1)
    boxes = random_boxes(rng, p, 50)
    raw = encode_head(boxes, p)
    dets = decode_head(raw, p)
    assert len(dets) == 50
    got = sorted((d.class_id, d.bbox.x + d.bbox.w / 2, d.bbox.y + d.bbox.h / 2, d.bbox.w, d.bbox.h) for d in dets)
    want = sorted((c, bx, by, bw, bh) for c, bx, by, bw, bh, _ in boxes)
    assert np.max(np.abs(np.array(got) - np.array(want))) <= 1e-6


def test_encode_slot_collision():
    p = params()
    with pytest.raises(SlotCollision):
        encode_head([(0, 0.51, 0.51, 0.1, 0.1, 0.5), (1, 0.52, 0.52, 0.1, 0.1, 0.5)], p)


# ------------------------------------------------------------------ detect_image

TINY_CFG = """[net]
width=32
height=32
channels=1
[convolutional]
filters=4
size=3
stride=1
pad=1
batch_normalize=1
activation=leaky
[maxpool]
size=4
stride=4
[convolutional]
filters=16
size=1
stride=1
activation=linear
[region]
num=2
classes=3
anchors=1,1,3,2
"""


def tiny_model(rng=None):
    m = parse_cfg(TINY_CFG)
    if rng is None:
        n = conv_float_count(m.layers[0], 1) + conv_float_count(m.layers[2], 4)
        return load_weights(m, darknet_bytes([]) + bytes(4 * n))
    layers = [{"biases": rng.normal(size=4), "scales": rng.normal(size=4), "mean": rng.normal(size=4),
               "var": rng.uniform(0.5, 2, size=4), "weights": rng.normal(size=(4, 1, 3, 3))},
              {"biases": rng.normal(size=16), "weights": rng.normal(0, 2, size=(16, 4, 1, 1))}]
    return load_weights(m, darknet_bytes(layers))


def test_detect_zero_weights_empty():
    m = tiny_model()
    frame = synth_scene(random_scene_params(0, modules_x=2, modules_y=1, cell_px=2))[0]
    assert detect_image(m, frame, HeadParams.from_model(m)) == []


@pytest.mark.parametrize("seed", range(5))
def test_detect_boxes_inside_frame_and_deterministic(seed):
    rng = np.random.default_rng(seed)
    m = tiny_model(rng)
    frame = synth_scene(random_scene_params(seed, modules_x=3, modules_y=1, cell_px=2, noise_sigma=100))[0]
    p = HeadParams.from_model(m, conf_threshold=0.05)
    dets = detect_image(m, frame, p)
    for d in dets:
        assert 0 <= d.bbox.x and d.bbox.x + d.bbox.w <= frame.width + 1e-9
        assert 0 <= d.bbox.y and d.bbox.y + d.bbox.h <= frame.height + 1e-9
        assert d.bbox.w > 0 and d.bbox.h > 0
    assert [d.score for d in dets] == sorted((d.score for d in dets), reverse=True)
    assert detect_image(m, frame, p) == dets


# ------------------------------------------------------------------ baseline

def test_baseline_constant_frame():
    assert baseline_detect(ThermalFrame(np.full((20, 30), 500, np.uint16)), 500, 100, 3) == []


def test_baseline_single_cell():
    frame, ann = synth_scene(SynthParams(defects=[(0, 1, 0, 7, 2)]))
    dets = baseline_detect(frame, 20000, 1000, 6)
    assert len(dets) == 1 and dets[0].class_id == 0
    t = ann.boxes()[0]
    assert iou_xywh((dets[0].bbox.x, dets[0].bbox.y, dets[0].bbox.w, dets[0].bbox.h),
                    (t.x, t.y, t.w, t.h)) >= 0.9


def test_baseline_glare_is_a_false_positive():
    frame, ann = synth_scene(SynthParams(glare=Glare(25.0, 30.0, 9.0, 3000)))
    assert ann.items == ()
    assert len(baseline_detect(frame, 20000, 1000, 6)) >= 1


@pytest.mark.parametrize("seed", range(10))
def test_baseline_counts_per_class(seed):
    p = random_scene_params(seed, modules_x=4, modules_y=3)
    frame, ann = synth_scene(p)
    dets = baseline_detect(frame, p.base_counts, p.hotspot_delta / 2, p.cell_px)
    for c in range(3):
        assert sum(d.class_id == c for d in dets) == sum(a.class_id == c for a in ann.items)
    truths = [(a.class_id, b) for a, b in zip(ann.items, ann.boxes())]
    for d in dets:
        best = max(iou_xywh((d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h), (b.x, b.y, b.w, b.h))
                   for c, b in truths if c == d.class_id)
        assert best >= 0.9


def test_baseline_components_match_bfs():
    rng = np.random.default_rng(3)
    px = rng.integers(0, 1000, size=(40, 50)).astype(np.uint16)
    dets = baseline_detect(ThermalFrame(px), 0, 700, 2)
    comps = bfs_components(px > 700)
    got = sorted((d.bbox.x, d.bbox.y, d.bbox.x + d.bbox.w - 1, d.bbox.y + d.bbox.h - 1) for d in dets)
    want = sorted(c[:4] for c in comps)
    assert got == want


def test_baseline_score_formula():
    px = np.full((10, 10), 100, np.uint16)
    px[2:4, 2:4] = [[400, 500], [600, 700]]
    d, = baseline_detect(ThermalFrame(px), 100, 200, 4)
    assert d.score == 1.0  # mean excess 450 against 2 * 200
    px[2:4, 2:4] = 350
    d, = baseline_detect(ThermalFrame(px), 100, 200, 4)
    assert d.score == pytest.approx(250 / 400)


# ------------------------------------------------------------------ JSON

def test_json_schema_and_round_trip():
    dets = [Detection(BBox(1.5, 2, 3, 4), 1, 0.123456789), Detection(BBox(0, 0, 1, 1), 0, 0.9)]
    doc = json.loads(json.dumps(detections_to_json("a.tif", 40, 30, dets)))
    assert set(doc) == {"image", "width", "height", "detections"}
    first = doc["detections"][0]
    assert set(first) == {"class_id", "class_name", "score", "bbox"}
    assert set(first["bbox"]) == {"x", "y", "w", "h"}
    assert [d["score"] for d in doc["detections"]] == [0.9, 0.123457]
    image, w, h, back = detections_from_json(doc)
    assert (image, w, h) == ("a.tif", 40, 30)
    assert back[1].class_name == "multi_cell_hotspot" and back[1].bbox == BBox(1.5, 2, 3, 4)
