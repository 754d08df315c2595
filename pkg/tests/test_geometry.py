import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c4av.geometry import Box, ScoredBox, area, assign_labels, iou, nms
from oracles import brute_force_nms, raster_iou


@pytest.mark.parametrize(
    "box, expected",
    [((0, 0, 10, 10), 100), ((3, 7, 0, 5), 0), ((1.5, 2.5, 4.0, 2.5), 10.0)],
)
def test_area(box, expected):
    assert area(Box(*box)) == expected


@pytest.mark.parametrize(
    "a, b, expected",
    [
        ((0, 0, 10, 10), (0, 0, 10, 10), 1.0),
        ((0, 0, 10, 10), (20, 20, 5, 5), 0.0),
        ((0, 0, 10, 10), (5, 5, 10, 10), 1 / 7),
        ((0, 0, 10, 10), (0, 0, 10, 20), 0.5),
    ],
)
def test_iou_examples(a, b, expected):
    a, b = Box(*a), Box(*b)
    assert iou(a, b) == pytest.approx(expected, abs=1e-12)
    assert raster_iou(a, b) == pytest.approx(expected, abs=1e-12)


def test_iou_degenerate_boxes():
    assert iou(Box(1, 1, 0, 0), Box(1, 1, 0, 0)) == 0.0
    assert iou(Box(1, 1, 0, 5), Box(0, 0, 10, 10)) == 0.0


@pytest.mark.parametrize("bad", [(0, 0, -1, 2), (0, 0, 2, -1), (math.nan, 0, 1, 1), (0, math.inf, 1, 1)])
def test_box_rejects_invalid(bad):
    with pytest.raises(ValueError):
        Box(*bad)


def test_corner_conversion_round_trip():
    b = Box(1.5, 2.0, 3.0, 4.5)
    assert Box.from_xyxy(*b.to_xyxy()) == b


def test_clamp():
    assert Box(-5, -5, 20, 20).clamp(10, 8) == Box(0, 0, 10, 8)
    assert Box(20, 20, 5, 5).clamp(10, 10).w == 0


int_boxes = st.builds(
    Box,
    st.integers(0, 200), st.integers(0, 200), st.integers(0, 56), st.integers(0, 56),
)
float_boxes = st.builds(
    Box,
    st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0, 1e3), st.floats(0, 1e3),
)


@given(float_boxes, float_boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


@given(st.builds(Box, st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3)))
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0)


@given(int_boxes, int_boxes, st.integers(-100, 100), st.integers(-100, 100))
def test_iou_translation_invariant(a, b, dx, dy):
    assert iou(a.translate(dx, dy), b.translate(dx, dy)) == pytest.approx(iou(a, b), abs=1e-12)


@settings(max_examples=300)
@given(int_boxes, int_boxes)
def test_iou_matches_rasterization(a, b):
    assert abs(iou(a, b) - raster_iou(a, b, canvas=256)) <= 1e-9


def test_nms_examples():
    assert nms([ScoredBox(Box(0, 0, 10, 10), 0.9)], 0.5) == [0]
    assert nms([], 0.5) == []
    cands = [
        ScoredBox(Box(0, 0, 10, 10), 0.9),
        ScoredBox(Box(0, 0, 10, 10), 0.8),
        ScoredBox(Box(50, 50, 10, 10), 0.5),
    ]
    assert nms(cands, 0.7) == [0, 2]


def test_nms_boundary_is_strict():
    # IoU exactly 0.5 survives a 0.5 threshold
    cands = [ScoredBox(Box(0, 0, 10, 20), 0.9), ScoredBox(Box(0, 0, 10, 10), 0.8)]
    assert nms(cands, 0.5) == [0, 1]
    assert nms(cands, 0.49) == [0]


def test_nms_tie_broken_by_index():
    cands = [ScoredBox(Box(0, 0, 10, 10), 0.5), ScoredBox(Box(1, 0, 10, 10), 0.5)]
    assert nms(cands, 0.3) == [0]


def test_nms_rejects_bad_threshold():
    with pytest.raises(ValueError):
        nms([], 1.5)


scored = st.builds(ScoredBox, int_boxes, st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9]))


@given(st.lists(scored, max_size=20), st.floats(0, 1))
def test_nms_matches_brute_force(cands, thr):
    keep = nms(cands, thr)
    boxes = [c.box for c in cands]
    conf = [c.confidence for c in cands]
    assert keep == brute_force_nms(boxes, conf, thr, iou)
    for pos, i in enumerate(keep):
        for j in keep[:pos]:
            assert iou(boxes[i], boxes[j]) <= thr
    assert [conf[i] for i in keep] == sorted((conf[i] for i in keep), reverse=True)


def test_assign_labels_examples():
    gt = Box(0, 0, 10, 10)
    assert assign_labels([gt], gt) == [True]
    assert assign_labels([Box(5, 5, 10, 10)], gt) == [False]
    assert assign_labels([Box(0, 0, 10, 20)], gt) == [True]


@given(st.lists(int_boxes, max_size=10), int_boxes)
def test_assign_labels_threshold_extremes(props, gt):
    assert len(assign_labels(props, gt)) == len(props)
    at_zero = assign_labels(props, gt, threshold=0.0)
    for p, lab in zip(props, at_zero):
        if iou(p, gt) > 0:
            assert lab
    assert not any(assign_labels(props, gt, threshold=1.0 + 1e-9))
