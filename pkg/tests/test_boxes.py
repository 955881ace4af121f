import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icpe.boxes import BoxAnnotation, clip_box, decode_deltas, encode_deltas, iou, nms


def test_iou_examples():
    assert iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-15)
    assert iou((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0
    assert iou(BoxAnnotation(0, 0, 2, 2, 1), (0, 0, 2, 2)) == 1.0


def test_nms_examples():
    assert nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.8, 0.9], 0.5) == [1]
    assert nms([(0, 0, 1, 1), (5, 5, 6, 6)], [0.2, 0.9], 0.5) == [1, 0]
    # ties go to the lower index
    assert nms([(0, 0, 4, 4), (0, 0, 4, 4)], [0.5, 0.5], 0.5) == [0]


def test_nms_suppresses_at_threshold_inclusive():
    a, b = (0, 0, 2, 2), (0, 0, 2, 1)  # iou 0.5
    assert iou(a, b) == 0.5
    assert nms([a, b], [0.9, 0.8], 0.5) == [0]


def test_delta_round_trip():
    prop, gt = (4.0, 6.0, 20.0, 30.0), (5.0, 4.0, 25.0, 28.0)
    back = decode_deltas(prop, encode_deltas(prop, gt))
    assert all(math.isclose(a, b, abs_tol=1e-12) for a, b in zip(back, gt))


def test_clip_box():
    assert clip_box((-3, 2, 70, 64.5), 64, 64) == (0.0, 2, 64, 64)


coord = st.floats(0, 60, allow_nan=False)


@settings(max_examples=100, deadline=None)
@given(coord, coord, st.floats(1, 20), st.floats(1, 20), coord, coord, st.floats(1, 20), st.floats(1, 20))
def test_iou_symmetric_and_bounded(x1, y1, w1, h1, x2, y2, w2, h2):
    a, b = (x1, y1, x1 + w1, y1 + h1), (x2, y2, x2 + w2, y2 + h2)
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == iou(b, a)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(coord, coord, st.floats(1, 10), st.floats(0, 1)), min_size=1, max_size=12))
def test_nms_keeps_top_and_no_kept_pair_overlaps(items):
    boxes = [(x, y, x + w, y + w) for x, y, w, _ in items]
    scores = [s for *_, s in items]
    keep = nms(boxes, scores, 0.5)
    assert keep[0] == max(range(len(scores)), key=lambda i: (scores[i], -i))
    for i in keep:
        for j in keep:
            if i != j:
                assert iou(boxes[i], boxes[j]) < 0.5
