"""Differentiable RoI warping: crop-and-resize by bilinear interpolation.

An output cell ``(v', u')`` of a box ``(x, y, w, h)`` samples the feature map
at ``(x + u'/W' * w, y + v'/H' * h)`` with ``u'`` running over the integers in
``[-W'/2, W'/2)``.  The map is separable, so per box it is applied as
``Gy @ F[c] @ Gx.T`` where each row of the per-axis factors ``Gx[W', W]`` and
``Gy[H', H]`` holds at most two nonzero kernel weights.  Samples that fall
outside the map contribute nothing.

Gradients are exact with respect to both the feature map and the four box
coordinates; the kernel derivative is taken as zero at its kinks.
"""

from typing import NamedTuple

import numpy as np

from . import ops
from .geometry import Box
from .tensor import ContractError, DimensionError, active_tape, as_tensor, Tensor

WARP_SIZE = 28


class WarpSpec(NamedTuple):
    box: Box
    out_w: int = WARP_SIZE
    out_h: int = WARP_SIZE


def kappa(t):
    return np.maximum(0.0, 1.0 - np.abs(t))


def kappa_prime(t):
    a = np.abs(t)
    return np.where((a > 0) & (a < 1), -np.sign(t), 0.0)


def target_offsets(n):
    """Integer target positions ``u'`` in ``[-n/2, n/2)``."""
    return np.arange(n) - n // 2


def bilinear_weight(u, u_prime, x, w, out_w):
    """Weight of grid index ``u`` for target index ``u_prime``."""
    return float(kappa(x + u_prime / out_w * w - u))


def bilinear_weight_grad(u, u_prime, x, w, out_w):
    """Partial derivatives ``(d/dx, d/dw)`` of :func:`bilinear_weight`."""
    kp = float(kappa_prime(x + u_prime / out_w * w - u))
    return kp, kp * u_prime / out_w


def axis_factors(centers, extents, out_n, in_n, dtype=np.float64):
    """Per-box interpolation factors along one axis.

    Returns ``(G, dG/dcenter, dG/dextent)``, each ``[R, out_n, in_n]``.
    """
    c = np.asarray(centers, dtype=np.float64)[:, None, None]
    e = np.asarray(extents, dtype=np.float64)[:, None, None]
    frac = (target_offsets(out_n) / out_n)[None, :, None]
    t = c + frac * e - np.arange(in_n)[None, None, :]
    g = kappa(t)
    kp = kappa_prime(t)
    return g.astype(dtype), kp.astype(dtype), (kp * frac).astype(dtype)


def _check_boxes(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise DimensionError(f"boxes must be [R,4], got {boxes.shape}")
    if not np.all(np.isfinite(boxes)):
        raise ContractError("non-finite box coordinates")
    if np.any(boxes[:, 2:] <= 0):
        raise ContractError("RoI warp needs positive box width and height")
    return boxes


def _check_features(features):
    f = np.asarray(features)
    if f.ndim != 3:
        raise DimensionError(f"feature map must be [C,H,W], got {f.shape}")
    return f


def warp_rois(features, boxes, out_h=WARP_SIZE, out_w=WARP_SIZE):
    """Warp each box of ``boxes[R,4]`` (feature-map units) to ``[R, C, out_h, out_w]``."""
    f = _check_features(features)
    boxes = _check_boxes(boxes)
    _, h, w = f.shape
    gx = axis_factors(boxes[:, 0], boxes[:, 2], out_w, w, f.dtype)[0]
    gy = axis_factors(boxes[:, 1], boxes[:, 3], out_h, h, f.dtype)[0]
    t = np.matmul(f[None], gx.transpose(0, 2, 1)[:, None])  # [R,C,H,Q]
    return np.matmul(gy[:, None], t)


def warp_rois_backward(features, boxes, grad_out, need_features=True, need_boxes=True):
    """Vector-Jacobian products of :func:`warp_rois`.

    Returns ``(grad_features[C,H,W], grad_boxes[R,4])``; either may be
    ``None`` when not requested.
    """
    f = _check_features(features)
    boxes = _check_boxes(boxes)
    g = np.asarray(grad_out)
    c, h, w = f.shape
    r = len(boxes)
    if g.ndim != 4 or g.shape[:2] != (r, c):
        raise DimensionError(f"grad_out shape {g.shape} does not match {r} boxes and {c} channels")
    out_h, out_w = g.shape[2:]
    gx, dgx_dx, dgx_dw = axis_factors(boxes[:, 0], boxes[:, 2], out_w, w, f.dtype)
    gy, dgy_dy, dgy_dh = axis_factors(boxes[:, 1], boxes[:, 3], out_h, h, f.dtype)

    grad_f = None
    if need_features:
        e = np.matmul(g, gx[:, None])  # [R,C,P,W]
        grad_f = np.tensordot(gy, e, axes=([0, 1], [0, 2])).transpose(1, 0, 2)

    grad_b = None
    if need_boxes:
        a = np.matmul(gy[:, None], f[None])  # [R,C,P,W]
        b = np.matmul(g.reshape(r, c * out_h, out_w).transpose(0, 2, 1), a.reshape(r, c * out_h, w))
        t = np.matmul(f[None], gx.transpose(0, 2, 1)[:, None])  # [R,C,H,Q]
        d = np.matmul(g, t.transpose(0, 1, 3, 2)).sum(axis=1)  # [R,P,H]
        grad_b = np.stack(
            [
                (b * dgx_dx).sum(axis=(1, 2)),
                (d * dgy_dy).sum(axis=(1, 2)),
                (b * dgx_dw).sum(axis=(1, 2)),
                (d * dgy_dh).sum(axis=(1, 2)),
            ],
            axis=1,
        )
    return grad_f, grad_b


def roi_warp_forward(features, spec):
    """Warp a single :class:`WarpSpec` box to ``[C, out_h, out_w]``."""
    return warp_rois(features, [tuple(spec.box)], spec.out_h, spec.out_w)[0]


def roi_warp_backward(features, spec, grad_out):
    """Returns ``(grad_features, (d/dx, d/dy, d/dw, d/dh))`` for one box."""
    g = np.asarray(grad_out)
    if g.shape != (np.shape(features)[0], spec.out_h, spec.out_w):
        raise DimensionError(f"grad_out shape {g.shape} does not match the warp output")
    gf, gb = warp_rois_backward(features, [tuple(spec.box)], g[None])
    return gf, gb[0]


def roi_warp(features, boxes, out_h=WARP_SIZE, out_w=WARP_SIZE):
    """Tape-recording warp of ``boxes[R,4]`` out of ``features[C,H,W]``."""
    features, boxes = as_tensor(features), as_tensor(boxes)
    out = warp_rois(features.data, boxes.data, out_h, out_w)
    tape = active_tape()
    if tape is None or not (features.requires_grad or boxes.requires_grad):
        return Tensor(out)

    def back(g):
        gf, gb = warp_rois_backward(
            features.data, boxes.data, g, features.requires_grad, boxes.requires_grad
        )
        return gf, None if gb is None else gb.astype(boxes.dtype, copy=False)

    return tape.record(out, (features, boxes), back)


def roi_pool(features, boxes, stage_pool, warp_size=WARP_SIZE):
    """Warp to ``warp_size``², then max-pool with window ``stage_pool``.

    ``boxes`` may be a single box ``(4,)`` (giving ``[C, h, w]``) or ``[R,4]``.
    """
    boxes = as_tensor(boxes)
    single = boxes.ndim == 1
    if single:
        boxes = ops.reshape(boxes, (1, 4))
    if warp_size % stage_pool:
        raise DimensionError(f"pool {stage_pool} does not divide warp size {warp_size}")
    pooled = ops.max_pool2d(roi_warp(features, boxes, warp_size, warp_size), stage_pool)
    if single:
        pooled = ops.reshape(pooled, pooled.shape[1:])
    return pooled
