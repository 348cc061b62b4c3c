"""The three loss terms of the cascade and their unweighted sum."""

import numpy as np

from .. import ops
from .model import select_class_deltas


def smooth_l1_value(d):
    """Plain smooth-L1 penalty, for reference and reporting."""
    d = np.abs(np.asarray(d, dtype=np.float64))
    return np.where(d < 1, 0.5 * d * d, d - 0.5)


def rpn_loss(logits, deltas, sample):
    """Stage-1 loss: mean logistic loss over the sampled anchors plus smooth-L1
    on the positives' deltas, also divided by the number of sampled anchors.

    Returns ``(classification, regression)`` scalar tensors.
    """
    n = max(len(sample.indices), 1)
    dt = logits.dtype
    cls = ops.sigmoid_cross_entropy(
        ops.take(logits, sample.indices), sample.labels, np.full(len(sample.indices), 1.0 / n, dtype=dt)
    )
    reg = ops.smooth_l1(ops.take(deltas, sample.positives), sample.targets, np.full(sample.targets.shape, 1.0 / n, dtype=dt))
    return cls, reg


def mask_loss(mask_logits, assignment):
    """Mean over positive RoIs of the mean per-pixel logistic loss (zero without positives)."""
    r, m2 = mask_logits.shape
    pos = assignment.positive.astype(np.float64)
    weights = np.repeat(pos[:, None], m2, axis=1) / (max(pos.sum(), 1.0) * m2)
    return ops.sigmoid_cross_entropy(mask_logits, assignment.targets.reshape(r, m2), weights)


def stage3_loss(cls_mask, cls_box, deltas, assignment, num_categories):
    """Both classifiers' cross-entropies and the class-wise box regression, each averaged over the RoIs.

    Returns ``(mask_cls, box_cls, regression)``.
    """
    r = cls_mask.shape[0]
    per_roi = np.full(r, 1.0 / max(r, 1))
    mask_cls = ops.softmax_cross_entropy(cls_mask, assignment.mask_labels, per_roi)
    box_cls = ops.softmax_cross_entropy(cls_box, assignment.box_labels, per_roi)
    chosen = select_class_deltas(deltas, assignment.box_labels, num_categories)
    wts = np.repeat((assignment.reg_weights / max(r, 1))[:, None], 4, axis=1)
    reg = ops.smooth_l1(chosen, assignment.reg_targets, wts)
    return mask_cls, box_cls, reg


def total_loss(*terms):
    """Unit-weighted sum of loss terms."""
    return ops.add_n(terms)
