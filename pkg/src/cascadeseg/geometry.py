"""Boxes, masks, anchors, IoU, box-delta coding and non-maximum suppression.

Boxes are center-parameterized rows ``(x, y, w, h)`` in pixels covering the
half-open span ``[x - w/2, x + w/2) x [y - h/2, y + h/2)``.  Pixel ``(r, c)``
of an image covers ``[c, c + 1) x [r, r + 1)``.
"""

import math
from typing import NamedTuple

import numpy as np

from .tensor import DimensionError

LOG_MAX_RATIO = math.log(1000.0)


class Box(NamedTuple):
    x: float
    y: float
    w: float
    h: float


class Proposal(NamedTuple):
    box: Box
    objectness: float


class BoxDelta(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def as_boxes(boxes):
    arr = np.asarray(boxes, dtype=np.float64)
    return arr.reshape(-1, 4)


def to_corners(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def from_corners(corners):
    c = np.asarray(corners, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def pairwise_iou(a, b):
    """IoU matrix ``[len(a), len(b)]`` using continuous areas."""
    ca, cb = to_corners(as_boxes(a)), to_corners(as_boxes(b))
    lo = np.maximum(ca[:, None, :2], cb[None, :, :2])
    hi = np.minimum(ca[:, None, 2:], cb[None, :, 2:])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=2)
    area_a = np.prod(ca[:, 2:] - ca[:, :2], axis=1)
    area_b = np.prod(cb[:, 2:] - cb[:, :2], axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def box_iou(a, b):
    """Intersection over union of two boxes."""
    return float(pairwise_iou(a, b)[0, 0])


# ----------------------------------------------------------------------------
# anchors and delta coding


def generate_anchors(feature_h, feature_w, stride, scales=(8, 16, 32), ratios=(0.5, 1.0, 2.0)):
    """Anchors ordered by (row, col, scale, ratio), shape ``[h*w*S*R, 4]``.

    A ratio ``r`` gives ``w = s*sqrt(r)`` and ``h = s/sqrt(r)``, so the area
    stays ``s**2``.
    """
    if stride < 1 or not len(scales) or not len(ratios):
        raise ValueError("generate_anchors needs stride >= 1 and nonempty scales/ratios")
    s = np.asarray(scales, dtype=np.float64)[:, None]
    r = np.sqrt(np.asarray(ratios, dtype=np.float64))[None, :]
    wh = np.stack([(s * r).ravel(), (s / r).ravel()], axis=1)  # [A, 2]
    ys, xs = np.meshgrid(np.arange(feature_h), np.arange(feature_w), indexing="ij")
    centers = np.stack([xs.ravel(), ys.ravel()], axis=1) * float(stride) + stride / 2.0
    a = len(wh)
    out = np.empty((len(centers), a, 4))
    out[:, :, :2] = centers[:, None, :]
    out[:, :, 2:] = wh[None, :, :]
    return out.reshape(-1, 4)


def encode_boxes(anchors, targets, stds=(1.0, 1.0, 1.0, 1.0)):
    """Deltas ``((xt-xa)/wa, (yt-ya)/ha, ln(wt/wa), ln(ht/ha)) / stds``."""
    a, t = as_boxes(anchors), as_boxes(targets)
    d = np.concatenate([(t[:, :2] - a[:, :2]) / a[:, 2:], np.log(t[:, 2:] / a[:, 2:])], axis=1)
    return d / np.asarray(stds, dtype=np.float64)


def decode_boxes(base, deltas, stds=(1.0, 1.0, 1.0, 1.0)):
    b = as_boxes(base)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4) * np.asarray(stds, dtype=np.float64)
    return np.concatenate(
        [b[:, :2] + d[:, :2] * b[:, 2:], b[:, 2:] * np.exp(np.minimum(d[:, 2:], LOG_MAX_RATIO))], axis=1
    )


def encode_box(anchor, target):
    return BoxDelta(*encode_boxes(anchor, target)[0])


def decode_box(base, delta):
    return Box(*decode_boxes(base, delta)[0])


def clip_boxes(boxes, width, height, min_size=1.0):
    """Clip to the image, keeping at least ``min_size`` extent (see :func:`cascadeseg.ops.clip_boxes`)."""
    c = to_corners(as_boxes(boxes))
    limit = np.array([width, height], dtype=np.float64)
    lo = np.clip(c[:, :2], 0, limit - min_size)
    hi = np.clip(c[:, 2:], min_size, limit)
    hi = np.where(hi - lo < min_size, lo + min_size, hi)
    return from_corners(np.concatenate([lo, hi], axis=1))


# ----------------------------------------------------------------------------
# non-maximum suppression


def nms(boxes, scores, iou_threshold, max_keep=None):
    """Greedy NMS; returns kept indices in descending score order.

    Equal scores are visited in ascending index order.  A candidate is
    suppressed when its IoU with a kept box exceeds ``iou_threshold``.
    Stopping after ``max_keep`` survivors yields exactly the first
    ``max_keep`` entries of the full result.
    """
    b = as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(b) != len(scores):
        raise DimensionError("nms: boxes and scores differ in length")
    order = np.argsort(-scores, kind="stable")
    c = to_corners(b)
    x1, y1, x2, y2 = (np.ascontiguousarray(c[:, i]) for i in range(4))
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        iw = np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest])
        ih = np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        union = areas[i] + areas[rest] - inter
        iou = inter / np.where(union > 0, union, np.inf)
        order = rest[iou <= iou_threshold]
    return keep


# ----------------------------------------------------------------------------
# masks


def rle_encode(bits):
    """Run lengths of a 2-D boolean array, row-major, starting with background."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs, width, height):
    total = int(np.sum(runs)) if len(runs) else 0
    if total != width * height:
        raise ValueError(f"RLE runs sum to {total}, expected {width * height}")
    values = np.arange(len(runs)) % 2 == 1
    return np.repeat(values, np.asarray(runs, dtype=np.int64)).reshape(height, width)


class BinaryMask:
    """Binary image-resolution mask, convertible to and from RLE text."""

    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {bits.shape}")
        self.bits = bits

    @property
    def height(self):
        return self.bits.shape[0]

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def area(self):
        return int(self.bits.sum())

    def runs(self):
        return rle_encode(self.bits)

    def to_rle(self):
        """Text form ``"w h; r0 r1 ..."``."""
        return f"{self.width} {self.height}; " + " ".join(map(str, self.runs()))

    @classmethod
    def from_runs(cls, runs, width, height):
        return cls(rle_decode(runs, width, height))

    @classmethod
    def from_rle(cls, text):
        head, _, body = text.partition(";")
        try:
            width, height = (int(v) for v in head.split())
            runs = [int(v) for v in body.split()]
        except ValueError as err:
            raise ValueError(f"malformed RLE {text[:40]!r}") from err
        return cls(rle_decode(runs, width, height))

    def tight_box(self):
        return tight_box(self.bits)

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and self.bits.shape == other.bits.shape and bool(
            np.array_equal(self.bits, other.bits)
        )

    def __repr__(self):
        return f"BinaryMask({self.width}x{self.height}, area={self.area})"


def _bits(mask):
    return mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)


def mask_iou(a, b):
    """``|a & b| / |a | b|``; zero when both masks are empty."""
    a, b = _bits(a), _bits(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask_iou: shapes {a.shape} and {b.shape} differ")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def tight_box(bits):
    """Smallest pixel-aligned box containing every set pixel, or ``None``."""
    bits = _bits(bits)
    rows = np.flatnonzero(bits.any(axis=1))
    cols = np.flatnonzero(bits.any(axis=0))
    if rows.size == 0:
        return None
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    return Box((x0 + x1) / 2.0, (y0 + y1) / 2.0, float(x1 - x0), float(y1 - y0))


def crop_resize_mask(bits, box, m):
    """Sample ``bits`` inside ``box`` at the centers of an ``m x m`` grid.

    Each cell takes the value of the pixel its center falls in; centers
    outside the image read as background.
    """
    bits = _bits(bits)
    h, w = bits.shape
    x, y, bw, bh = (float(v) for v in box)
    centers = (np.arange(m) + 0.5) / m
    cols = np.floor(x - bw / 2 + centers * bw).astype(np.int64)
    rows = np.floor(y - bh / 2 + centers * bh).astype(np.int64)
    col_ok = (cols >= 0) & (cols < w)
    row_ok = (rows >= 0) & (rows < h)
    out = bits[np.clip(rows, 0, h - 1)][:, np.clip(cols, 0, w - 1)]
    return out & row_ok[:, None] & col_ok[None, :]


def _paste_weights(lo, extent, m, n):
    """Interpolation matrix from the ``m`` mask cells to pixels ``0..n-1``.

    Pixels whose centers fall outside ``[lo, lo + extent)`` get zero rows.
    """
    centers = np.arange(n) + 0.5
    inside = (centers >= lo) & (centers < lo + extent)
    pos = np.clip((centers - lo) / extent * m - 0.5, 0, m - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, m - 1)
    frac = pos - i0
    wts = np.zeros((n, m))
    rows = np.arange(n)
    np.add.at(wts, (rows, i0), (1 - frac) * inside)
    np.add.at(wts, (rows, i1), frac * inside)
    return wts, inside


def paste_mask(probs, box, height, width):
    """Render an ``m x m`` probability map into its box on a blank image.

    Bilinear interpolation between cell centers (clamped at the border);
    pixels whose centers lie outside the box are zero.
    """
    probs = np.asarray(probs, dtype=np.float64)
    m = probs.shape[0]
    x, y, bw, bh = (float(v) for v in box)
    wx, in_x = _paste_weights(x - bw / 2, bw, m, width)
    wy, in_y = _paste_weights(y - bh / 2, bh, m, height)
    out = np.zeros((height, width))
    cols, rows = np.flatnonzero(in_x), np.flatnonzero(in_y)
    if cols.size and rows.size:
        out[np.ix_(rows, cols)] = wy[rows] @ probs @ wx[cols].T
    return out
