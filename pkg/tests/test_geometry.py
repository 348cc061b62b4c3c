import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cascadeseg.geometry import (
    BinaryMask,
    Box,
    box_iou,
    clip_boxes,
    crop_resize_mask,
    decode_box,
    decode_boxes,
    encode_box,
    encode_boxes,
    generate_anchors,
    mask_iou,
    nms,
    pairwise_iou,
    paste_mask,
    rle_decode,
    rle_encode,
    tight_box,
)
from cascadeseg.tensor import DimensionError
from oracles import iou_by_counting, iou_reference, mask_iou_by_counting, nms_reference

box_st = st.tuples(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 40), st.floats(0.5, 40)
).map(lambda t: np.array(t))


def random_boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size, size=(n, 2))
    wh = rng.uniform(2, size / 3, size=(n, 2))
    return np.concatenate([xy, wh], axis=1)


# ----------------------------------------------------------------------------
# IoU


def test_box_iou_simple_cases():
    assert box_iou(Box(5, 5, 4, 4), Box(5, 5, 4, 4)) == 1.0
    assert box_iou(Box(0, 0, 2, 2), Box(10, 10, 2, 2)) == 0.0
    # touching half-open spans do not overlap
    assert box_iou(Box(1, 1, 2, 2), Box(3, 1, 2, 2)) == 0.0


def test_unit_squares_against_counting_oracle():
    a, b = Box(0.5, 0.5, 1, 1), Box(1.0, 1.0, 1, 1)
    assert box_iou(a, b) == pytest.approx(1 / 7, abs=1e-12)
    assert abs(box_iou(a, b) - iou_by_counting(a, b)) < 1e-3


def test_random_boxes_against_counting_oracle(rng):
    for _ in range(10):
        a, b = random_boxes(rng, 2, size=6.0)
        assert abs(box_iou(a, b) - iou_by_counting(a, b)) < 1e-3


@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = box_iou(a, b), box_iou(b, a)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert 0.0 <= ab <= 1.0 + 1e-12
    assert ab == pytest.approx(iou_reference(a, b), abs=1e-9)


def test_pairwise_iou_shape(rng):
    a, b = random_boxes(rng, 3), random_boxes(rng, 5)
    m = pairwise_iou(a, b)
    assert m.shape == (3, 5)
    for i in range(3):
        for j in range(5):
            assert m[i, j] == pytest.approx(iou_reference(a[i], b[j]), abs=1e-12)


# ----------------------------------------------------------------------------
# masks


def test_mask_iou_cases():
    a = np.zeros((6, 6), bool)
    a[1:4, 1:5] = True
    assert mask_iou(a, a) == 1.0
    b = np.zeros((6, 6), bool)
    b[4:, :] = True
    assert mask_iou(a, b) == 0.0
    c = np.zeros((6, 6), bool)
    c[1:4, 3:6] = True  # half overlapping rectangle
    assert mask_iou(a, c) == mask_iou_by_counting(a, c) == pytest.approx(6 / 15)
    assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0
    with pytest.raises(DimensionError):
        mask_iou(np.zeros((3, 3)), np.zeros((3, 4)))


@given(arrays(bool, (7, 9)), arrays(bool, (7, 9)))
def test_mask_iou_matches_bit_counting(a, b):
    assert mask_iou(a, b) == pytest.approx(mask_iou_by_counting(a, b), abs=1e-12)
    assert mask_iou(a, b) == mask_iou(b, a)


@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_rle_round_trip(bits):
    h, w = bits.shape
    runs = rle_encode(bits)
    assert sum(runs) == h * w
    assert all(r > 0 for r in runs[1:])
    np.testing.assert_array_equal(rle_decode(runs, w, h), bits)
    m = BinaryMask(bits)
    assert BinaryMask.from_rle(m.to_rle()) == m


def test_rle_text_form():
    bits = np.array([[1, 1, 0], [0, 0, 1]], bool)
    assert BinaryMask(bits).to_rle() == "3 2; 0 2 3 1"
    with pytest.raises(ValueError):
        rle_decode([1, 2], 3, 2)


def test_tight_box():
    bits = np.zeros((10, 10), bool)
    bits[2:5, 3:9] = True
    assert tight_box(bits) == Box(6.0, 3.5, 6.0, 3.0)
    assert tight_box(np.zeros((3, 3), bool)) is None


def test_crop_resize_identity_and_half():
    bits = np.zeros((20, 20), bool)
    bits[4:12, 6:14] = True
    box = tight_box(bits)
    np.testing.assert_array_equal(crop_resize_mask(bits, box, 8), np.ones((8, 8), bool))
    # left half of the object's box is still fully foreground
    left = Box(box.x - box.w / 4, box.y, box.w / 2, box.h)
    assert crop_resize_mask(bits, left, 28).all()


def test_paste_mask_fills_box_only():
    out = paste_mask(np.ones((4, 4)), Box(5.0, 5.0, 4.0, 2.0), 10, 10)
    expected = np.zeros((10, 10))
    expected[4:6, 3:7] = 1.0
    np.testing.assert_allclose(out, expected)


# ----------------------------------------------------------------------------
# anchors and deltas


def test_single_anchor():
    a = generate_anchors(1, 1, 16, scales=(8,), ratios=(1.0,))
    np.testing.assert_allclose(a, [[8.0, 8.0, 8.0, 8.0]])


def test_anchor_count_and_area():
    a = generate_anchors(4, 4, 8)
    assert a.shape == (144, 4)
    areas = a[:, 2] * a[:, 3]
    expected = np.tile(np.repeat([64.0, 256.0, 1024.0], 3), 16)
    np.testing.assert_allclose(areas, expected, rtol=1e-9)
    # (row, col, scale, ratio) order: the second position is one stride to the right
    np.testing.assert_allclose(a[9, :2], [12.0, 4.0])
    np.testing.assert_allclose(a[4 * 9, :2], [4.0, 12.0])


def test_encode_decode_identities():
    b = Box(10.0, 12.0, 6.0, 8.0)
    assert encode_box(b, b) == (0.0, 0.0, 0.0, 0.0)
    assert decode_box(b, (0, 0, 0, 0)) == b
    d = encode_box(Box(0, 0, 2, 4), Box(1, 2, 4, 2))
    np.testing.assert_allclose(d, [0.5, 0.5, math.log(2), math.log(0.5)])


@given(box_st.filter(lambda b: b[2] > 0 and b[3] > 0), box_st)
def test_encode_decode_round_trip(a, t):
    back = decode_boxes(a, encode_boxes(a, t))[0]
    np.testing.assert_allclose(back, t, rtol=1e-9, atol=1e-9)


def test_decode_clamps_size_delta():
    out = decode_boxes([[0, 0, 1, 1]], [[0, 0, 50.0, 50.0]])
    np.testing.assert_allclose(out[0, 2:], [1000.0, 1000.0])


def test_clip_boxes_keeps_min_extent():
    out = clip_boxes([[-10, 5, 4, 4], [25, 35, 20, 20], [5, 5, 2, 2], [50, 50, 20, 20]], 30, 40)
    np.testing.assert_allclose(out[0], [0.5, 5, 1, 4])
    np.testing.assert_allclose(out[1], [22.5, 32.5, 15, 15])
    np.testing.assert_allclose(out[2], [5, 5, 2, 2])
    # entirely outside: collapses to a min-size box at the border
    np.testing.assert_allclose(out[3], [29.5, 39.5, 1, 1])


# ----------------------------------------------------------------------------
# NMS


def test_nms_small_cases():
    assert nms([[5, 5, 4, 4]], [0.3], 0.7) == [0]
    assert nms([[5, 5, 4, 4], [5, 5, 4, 4]], [0.8, 0.9], 0.7) == [1]
    # ties go to the lower index
    assert nms([[5, 5, 4, 4], [5, 5, 4, 4]], [0.5, 0.5], 0.7) == [0]
    assert nms(np.zeros((0, 4)), [], 0.5) == []


def test_nms_matches_reference_on_1000_boxes(rng):
    boxes = random_boxes(rng, 1000)
    scores = rng.random(1000)
    for thr in (0.3, 0.5, 0.7):
        assert nms(boxes, scores, thr) == nms_reference(boxes, scores, thr)


def test_nms_quantized_scores_with_ties(rng):
    boxes = random_boxes(rng, 300, size=40.0)
    scores = rng.integers(0, 5, size=300).astype(float)
    assert nms(boxes, scores, 0.5) == nms_reference(boxes, scores, 0.5)


def test_nms_max_keep_is_prefix(rng):
    boxes = random_boxes(rng, 200)
    scores = rng.random(200)
    full = nms(boxes, scores, 0.5)
    assert nms(boxes, scores, 0.5, max_keep=7) == full[:7]


@given(st.integers(0, 2**32 - 1))
def test_nms_invariant_under_monotone_scores(seed):
    rng = np.random.default_rng(seed)
    boxes = random_boxes(rng, 40, size=30.0)
    scores = rng.random(40)
    assert nms(boxes, scores, 0.5) == nms(boxes, np.exp(3 * scores) - 2.0, 0.5)


def test_nms_threshold_extremes(rng):
    boxes = random_boxes(rng, 30)
    scores = rng.random(30)
    assert sorted(nms(boxes, scores, 1.0)) == list(range(30))
    same = np.tile([[10.0, 10.0, 6.0, 6.0]], (5, 1)) + rng.uniform(0, 0.01, size=(5, 4))
    s = rng.random(5)
    assert nms(same, s, 0.5) == [int(np.argmax(s))]
