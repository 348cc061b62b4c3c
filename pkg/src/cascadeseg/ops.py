"""Differentiable operators.

Every function takes :class:`~cascadeseg.tensor.Tensor` arguments (plain
arrays are accepted for constant operands), computes its result with numpy
and, when a tape is active and an input requires a gradient, records a
backward rule.  Shapes must match exactly; there is no implicit broadcasting.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, active_tape, as_tensor

LOG_MAX_RATIO = math.log(1000.0)


def _record(data, inputs, backward):
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    return tape.record(data, inputs, backward)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ----------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a, c):
    """Multiply by a python scalar ``c``."""
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def scale_gradient(a, c):
    """Identity in the forward pass; the backward pass multiplies by ``c``."""
    a = as_tensor(a)
    c = float(c)
    return _record(a.data.copy(), (a,), lambda g: (g * c,))


def mul(a, b):
    """Elementwise product of two tensors of identical shape."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "elementwise_mul")
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


elementwise_mul = mul


def sum(a):
    a = as_tensor(a)
    shape, dtype = a.shape, a.dtype
    return _record(np.asarray(a.data.sum(), dtype=dtype), (a,), lambda g: (np.full(shape, g, dtype=dtype),))


def mean(a):
    a = as_tensor(a)
    shape, dtype, n = a.shape, a.dtype, a.size
    return _record(np.asarray(a.data.mean(), dtype=dtype), (a,), lambda g: (np.full(shape, g / n, dtype=dtype),))


def add_n(terms):
    """Sum of scalar (or same-shape) tensors."""
    terms = [as_tensor(t) for t in terms]
    out = terms[0].data.copy()
    for t in terms[1:]:
        _same_shape(terms[0], t, "add_n")
        out = out + t.data
    return _record(out, terms, lambda g: tuple(g for _ in terms))


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1 - s),))


def _softmax(z, axis=-1):
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis=-1):
    a = as_tensor(a)
    p = _softmax(a.data, axis)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _record(p, (a,), back)


# ----------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, indices, axis=0):
    """Select entries along ``axis`` (indices may repeat)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _record(np.take(a.data, idx, axis=axis), (a,), back)


def expand(a, axis, n):
    """Insert a new axis at ``axis`` and repeat ``n`` times along it."""
    a = as_tensor(a)
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _record(out, (a,), lambda g: (g.sum(axis=axis),))


# ----------------------------------------------------------------------------
# layers


def conv2d(x, kernels, bias=None, stride=1, pad=0):
    """2-D cross-correlation of ``x[C,H,W]`` with ``kernels[O,C,kh,kw]``, zero padded."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim != 3 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects [C,H,W] and [O,C,kh,kw], got {x.shape} and {kernels.shape}")
    c, h, w = x.shape
    o, kc, kh, kw = kernels.shape
    if kc != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernels expect {kc}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    out = np.tensordot(kernels.data, win, axes=([1, 2, 3], [0, 3, 4]))
    inputs = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data[:, None, None]
        inputs.append(bias)

    def back(g):
        gk = np.tensordot(g, win, axes=([1, 2], [1, 2])) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(kernels.data, g, axes=([0], [0]))  # [C,kh,kw,ho,wo]
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _record(out, inputs, back)


def affine(x, weight, bias):
    """``weight @ x + bias`` for ``x[n]``, or row-wise for a batch ``x[R,n]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1] or bias.shape != (weight.shape[0],):
        raise DimensionError(f"affine: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def back(g):
        gx = g @ weight.data if x.requires_grad else None
        if x.ndim == 1:
            gw = np.outer(g, x.data)
            gb = g
        else:
            gw = g.T @ x.data
            gb = g.sum(axis=0)
        return gx, gw, gb

    return _record(out, (x, weight, bias), back)


def max_pool2d(x, window):
    """Non-overlapping max pooling over the last two axes.

    Gradients go to the first maximal element of each window.
    """
    x = as_tensor(x)
    *lead, h, w = x.shape
    k = int(window)
    if k < 1 or h % k or w % k:
        raise DimensionError(f"max_pool2d: window {k} does not divide {h}x{w}")
    nl = len(lead)
    # gather each window into a contiguous last axis, row-major inside the window
    cells = x.data.reshape(*lead, h // k, k, w // k, k)
    order = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3)
    cells = cells.transpose(order).reshape(*lead, h // k, w // k, k * k)
    arg = cells.argmax(axis=-1)  # first maximum on ties
    out = np.take_along_axis(cells, arg[..., None], axis=-1)[..., 0]

    def back(g):
        flat = np.zeros(cells.shape, dtype=g.dtype)
        np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
        flat = flat.reshape(*lead, h // k, w // k, k, k).transpose(order)
        return (flat.reshape(x.shape),)

    return _record(out, (x,), back)


def separable_linear(x, left, right):
    """``left @ x[..., H, W] @ right.T`` with constant ``left[P,H]``, ``right[Q,W]``."""
    x = as_tensor(x)
    left = np.asarray(left, dtype=x.dtype)
    right = np.asarray(right, dtype=x.dtype)
    if x.shape[-2] != left.shape[1] or x.shape[-1] != right.shape[1]:
        raise DimensionError(f"separable_linear: {x.shape} vs {left.shape}, {right.shape}")
    out = left @ x.data @ right.T
    return _record(out, (x,), lambda g: (left.T @ g @ right,))


# ----------------------------------------------------------------------------
# losses (each returns a scalar: the weighted sum of per-element terms)


def sigmoid_cross_entropy(logits, targets, weights):
    """Weighted sum of binary logistic losses ``sum(w * bce(sigmoid(z), t))``."""
    logits = as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    wts = np.asarray(weights, dtype=z.dtype)
    if t.shape != z.shape or wts.shape != z.shape:
        raise DimensionError("sigmoid_cross_entropy: logits, targets and weights must share a shape")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray((wts * per).sum(), dtype=z.dtype)
    return _record(out, (logits,), lambda g: (g * wts * (_sigmoid(z) - t),))


def softmax_cross_entropy(logits, labels, weights):
    """Weighted sum over rows of ``-log softmax(z)[label]`` for ``logits[R,K]``."""
    logits = as_tensor(logits)
    z = logits.data
    labels = np.asarray(labels, dtype=np.intp)
    wts = np.asarray(weights, dtype=z.dtype)
    if z.ndim != 2 or labels.shape != (z.shape[0],) or wts.shape != labels.shape:
        raise DimensionError("softmax_cross_entropy: expected logits[R,K], labels[R], weights[R]")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    out = np.asarray(-(wts * logp[rows, labels]).sum(), dtype=z.dtype)

    def back(g):
        d = np.exp(logp)
        d[rows, labels] -= 1
        return (g * wts[:, None] * d,)

    return _record(out, (logits,), back)


def smooth_l1(pred, target, weights):
    """Weighted sum of smooth-L1 penalties (quadratic for ``|d| < 1``)."""
    pred = as_tensor(pred)
    p = pred.data
    t = np.asarray(target, dtype=p.dtype)
    wts = np.asarray(weights, dtype=p.dtype)
    if t.shape != p.shape or wts.shape != p.shape:
        raise DimensionError("smooth_l1: pred, target and weights must share a shape")
    d = p - t
    small = np.abs(d) < 1
    per = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    out = np.asarray((wts * per).sum(), dtype=p.dtype)
    return _record(out, (pred,), lambda g: (g * wts * np.where(small, d, np.sign(d)),))


# ----------------------------------------------------------------------------
# box coordinates (center form x, y, w, h)


def decode_boxes(base, deltas, stds=(1.0, 1.0, 1.0, 1.0)):
    """Apply deltas ``(tx, ty, tw, th) * stds`` to ``base[K,4]`` boxes.

    Size deltas are clamped at ``ln(1000)`` before exponentiation; the clamp
    passes no gradient.
    """
    base, deltas = as_tensor(base), as_tensor(deltas)
    _same_shape(base, deltas, "decode_boxes")
    b, d = base.data, deltas.data
    s = np.asarray(stds, dtype=d.dtype)
    sd = d * s
    logs = np.minimum(sd[:, 2:], LOG_MAX_RATIO)
    ratio = np.exp(logs)
    out = np.empty_like(b)
    out[:, :2] = b[:, :2] + sd[:, :2] * b[:, 2:]
    out[:, 2:] = b[:, 2:] * ratio
    live = sd[:, 2:] < LOG_MAX_RATIO

    def back(g):
        gb = np.empty_like(g)
        gb[:, :2] = g[:, :2]
        gb[:, 2:] = g[:, :2] * sd[:, :2] + g[:, 2:] * ratio
        gd = np.empty_like(g)
        gd[:, :2] = g[:, :2] * b[:, 2:] * s[:2]
        gd[:, 2:] = g[:, 2:] * b[:, 2:] * ratio * s[2:] * live
        return gb, gd

    return _record(out, (base, deltas), back)


def clip_boxes(boxes, width, height, min_size=1.0):
    """Clip center-form boxes to ``[0, width] x [0, height]``.

    Each side keeps at least ``min_size`` extent; where that floor is active
    the far edge follows the near edge.
    """
    boxes = as_tensor(boxes)
    b = boxes.data
    lo = b[:, :2] - b[:, 2:] / 2
    hi = b[:, :2] + b[:, 2:] / 2
    limit = np.array([width, height], dtype=b.dtype)
    lo_c = np.clip(lo, 0, limit - min_size)
    hi_c = np.clip(hi, min_size, limit)
    floor = hi_c - lo_c < min_size
    hi_c = np.where(floor, lo_c + min_size, hi_c)
    lo_live = (lo > 0) & (lo < limit - min_size)
    hi_live = (hi > min_size) & (hi < limit) & ~floor
    out = np.concatenate([(lo_c + hi_c) / 2, hi_c - lo_c], axis=1)

    def back(g):
        g_lo = g[:, :2] / 2 - g[:, 2:]
        g_hi = g[:, :2] / 2 + g[:, 2:]
        g_lo = np.where(floor, g_lo + g_hi, g_lo) * lo_live
        g_hi = g_hi * hi_live
        return (np.concatenate([g_lo + g_hi, (g_hi - g_lo) / 2], axis=1),)

    return _record(out, (boxes,), back)
