import numpy as np
import pytest
from hypothesis import given, strategies as st

from cascadeseg import ops
from cascadeseg.geometry import Box
from cascadeseg.gradcheck import central_difference, kink_distance, random_warp_case, rel_error
from cascadeseg.roi_warp import (
    WarpSpec,
    bilinear_weight,
    bilinear_weight_grad,
    roi_pool,
    roi_warp,
    roi_warp_backward,
    roi_warp_forward,
    warp_rois,
    warp_rois_backward,
)
from cascadeseg.tensor import ContractError, DimensionError, Tape, Tensor
from oracles import warp_reference


def test_bilinear_weight_examples():
    assert bilinear_weight(8, -2, 10.0, 4.0, 4) == 1.0
    assert bilinear_weight(7, -2, 10.0, 4.0, 4) == 0.0
    assert bilinear_weight(10, 0, 10.5, 4.0, 4) == 0.5


def test_bilinear_weight_derivatives():
    # t = 10.3 + (-1/4)*4 - 9 = 0.3 > 0, so d/dx = -1 and d/dw = -1 * (-1/4)
    dx, dw = bilinear_weight_grad(9, -1, 10.3, 4.0, 4)
    assert (dx, dw) == (-1.0, 0.25)
    assert bilinear_weight_grad(8, -2, 10.0, 4.0, 4) == (0.0, 0.0)


def test_forward_matches_direct_sum(rng):
    for _ in range(15):
        f = rng.normal(size=(2, 9, 11))
        box = np.array([rng.uniform(-2, 13), rng.uniform(-2, 11), rng.uniform(0.5, 12), rng.uniform(0.5, 10)])
        out_h, out_w = (int(v) for v in rng.integers(1, 7, size=2))
        np.testing.assert_allclose(warp_rois(f, box[None], out_h, out_w)[0], warp_reference(f, box, out_h, out_w), atol=1e-12)


def test_constant_map_interior_box():
    f = np.full((2, 12, 12), 3.5)
    out = roi_warp_forward(f, WarpSpec(Box(6.2, 5.7, 5.0, 4.3), 8, 8))
    np.testing.assert_allclose(out, 3.5, atol=1e-12)


def test_integer_aligned_box_is_exact_crop(rng):
    f = rng.normal(size=(3, 16, 16))
    out = roi_warp_forward(f, WarpSpec(Box(7.0, 9.0, 6.0, 4.0), 6, 4))
    np.testing.assert_array_equal(out, f[:, 7:11, 4:10])


def test_linear_ramp_reproduced():
    f = np.broadcast_to(np.arange(20.0)[None, None, :], (1, 20, 20)).copy()
    x, w, n = 9.37, 7.3, 8
    out = roi_warp_forward(f, WarpSpec(Box(x, 10.1, w, 6.0), n, n))
    expected = x + (np.arange(n) - n // 2) / n * w
    np.testing.assert_allclose(out[0], np.broadcast_to(expected, (n, n)), atol=1e-12)


def test_outside_samples_are_zero():
    f = np.ones((1, 4, 4))
    out = roi_warp_forward(f, WarpSpec(Box(-5.0, -5.0, 2.0, 2.0), 2, 2))
    assert not out.any()


def test_non_positive_extent_rejected():
    with pytest.raises(ContractError):
        warp_rois(np.zeros((1, 4, 4)), [[1, 1, 0, 1]])
    with pytest.raises(DimensionError):
        roi_warp_backward(np.zeros((1, 4, 4)), WarpSpec(Box(2, 2, 2, 2), 2, 2), np.zeros((1, 3, 3)))


def test_zero_upstream_gives_zero_gradients(rng):
    f = rng.normal(size=(2, 8, 8))
    gf, gb = roi_warp_backward(f, WarpSpec(Box(4.3, 3.9, 3.1, 2.7), 4, 4), np.zeros((2, 4, 4)))
    assert not gf.any() and not gb.any()


def test_constant_map_has_no_box_gradient(rng):
    f = np.full((2, 16, 16), 1.7)
    _, gb = roi_warp_backward(f, WarpSpec(Box(8.2, 7.6, 5.3, 4.1), 4, 4), rng.normal(size=(2, 4, 4)))
    np.testing.assert_allclose(gb, 0.0, atol=1e-12)


def test_box_gradient_matches_finite_differences(rng):
    for _ in range(25):
        f, box, oh, ow = random_warp_case(rng)
        assert kink_distance(box, oh, ow) >= 0.3 - 1e-12
        g = rng.normal(size=(f.shape[0], oh, ow))
        spec = WarpSpec(Box(*box), ow, oh)
        _, gb = roi_warp_backward(f, spec, g)
        b = box.copy()

        def objective():
            return float(np.sum(roi_warp_forward(f, WarpSpec(Box(*b), ow, oh)) * g))

        num = [central_difference(objective, b, k, 1e-4) for k in range(4)]
        assert rel_error(gb, num) <= 1e-4


def test_adjoint(rng):
    for _ in range(10):
        f, box, oh, ow = random_warp_case(rng)
        g = rng.normal(size=(1, f.shape[0], oh, ow))
        gf, _ = warp_rois_backward(f, box[None], g)
        lhs = np.sum(warp_rois(f, box[None], oh, ow) * g)
        assert abs(lhs - np.sum(f * gf)) <= 1e-10 * max(abs(lhs), 1.0)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_linearity_in_features(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    f1, f2 = rng.normal(size=(2, 2, 10, 10))
    box = np.array([[rng.uniform(1, 9), rng.uniform(1, 9), rng.uniform(1, 8), rng.uniform(1, 8)]])
    lhs = warp_rois(alpha * f1 + beta * f2, box, 5, 5)
    rhs = alpha * warp_rois(f1, box, 5, 5) + beta * warp_rois(f2, box, 5, 5)
    np.testing.assert_allclose(lhs, rhs, atol=1e-13)


def test_batched_backward_equals_per_box(rng):
    f = rng.normal(size=(3, 10, 12))
    boxes = np.array([[4.3, 5.1, 3.3, 4.7], [7.9, 2.2, 6.1, 2.9], [1.1, 8.8, 2.2, 5.5]])
    g = rng.normal(size=(3, 3, 4, 5))
    gf, gb = warp_rois_backward(f, boxes, g)
    total = np.zeros_like(f)
    for r in range(3):
        gfi, gbi = roi_warp_backward(f, WarpSpec(Box(*boxes[r]), 5, 4), g[r])
        total += gfi
        np.testing.assert_allclose(gb[r], gbi, atol=1e-12)
    np.testing.assert_allclose(gf, total, atol=1e-12)


def test_tape_op_routes_gradients(rng):
    f = Tensor(rng.normal(size=(2, 9, 9)), requires_grad=True)
    b = Tensor(np.array([[4.3, 4.6, 3.2, 2.9]]), requires_grad=True)
    g = rng.normal(size=(1, 2, 4, 4))
    with Tape() as tape:
        loss = ops.sum(ops.mul(roi_warp(f, b, 4, 4), Tensor(g)))
    grads = tape.gradients(loss)
    gf, gb = warp_rois_backward(f.data, b.data, g)
    np.testing.assert_allclose(grads[f.key], gf)
    np.testing.assert_allclose(grads[b.key], gb)


def test_roi_pool_shapes():
    f = np.full((3, 20, 20), 2.0)
    box = np.array([10.2, 9.7, 8.0, 6.0])
    s2 = roi_pool(f, box, 2)
    s3 = roi_pool(f, box, 4)
    assert s2.shape == (3, 14, 14) and s3.shape == (3, 7, 7)
    np.testing.assert_allclose(s3.data, 2.0)
    with pytest.raises(DimensionError):
        roi_pool(f, box, 3)
