"""Positive/negative sample definitions for every stage of the cascade."""

from dataclasses import dataclass

import numpy as np

from ..geometry import crop_resize_mask, encode_boxes, mask_iou, paste_mask, pairwise_iou


def _gt_boxes(gts):
    return np.array([tuple(a.box) for a in gts], dtype=np.float64).reshape(-1, 4)


@dataclass
class AnchorSample:
    indices: np.ndarray  # sampled anchor indices
    labels: np.ndarray  # 1 object / 0 background, aligned with ``indices``
    positives: np.ndarray  # anchor indices of sampled positives
    targets: np.ndarray  # [P, 4] regression targets for ``positives``


def label_anchors(anchors, gt_boxes, config):
    """Per-anchor label (1, 0 or -1 for "don't care") and best-matching ground truth."""
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(n, dtype=np.int64)
    iou = pairwise_iou(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best = iou[np.arange(n), best_gt]
    labels[best <= config.rpn_negative_iou] = 0
    gt_best = iou.max(axis=0)
    # the highest-IoU anchors of every ground truth are positive, ties included
    top = np.flatnonzero(((iou == gt_best[None, :]) & (gt_best[None, :] > 0)).any(axis=1))
    labels[top] = 1
    labels[best >= config.rpn_positive_iou] = 1
    return labels, best_gt


def sample_anchors(anchors, gt_boxes, config, rng):
    labels, best_gt = label_anchors(anchors, gt_boxes, config)
    total = config.anchors_per_image
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(total * config.rpn_positive_fraction))
    pos = np.sort(rng.choice(pos, n_pos, replace=False)) if n_pos < len(pos) else pos
    n_neg = min(len(neg), total - len(pos))
    neg = np.sort(rng.choice(neg, n_neg, replace=False)) if n_neg < len(neg) else neg
    indices = np.concatenate([pos, neg])
    sample_labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    targets = encode_boxes(anchors[pos], gt_boxes[best_gt[pos]]) if len(pos) else np.zeros((0, 4))
    return AnchorSample(indices, sample_labels, pos, targets)


def sample_rois(candidates, gt_boxes, config, rng):
    """Indices of up to ``rois_per_image`` candidates, foreground first."""
    n = len(candidates)
    if len(gt_boxes):
        best = pairwise_iou(candidates, gt_boxes).max(axis=1)
    else:
        best = np.zeros(n)
    fg = np.flatnonzero(best >= config.roi_fg_iou)
    bg = np.flatnonzero((best < config.roi_fg_iou) & (best >= config.roi_bg_iou_low))
    n_fg = min(len(fg), int(round(config.rois_per_image * config.roi_fg_fraction)))
    fg = rng.choice(fg, n_fg, replace=False) if n_fg < len(fg) else fg
    n_bg = min(len(bg), config.rois_per_image - len(fg))
    bg = rng.choice(bg, n_bg, replace=False) if n_bg < len(bg) else bg
    return np.concatenate([np.sort(fg), np.sort(bg)]).astype(np.int64)


def _match(boxes, gts):
    if not gts:
        return np.zeros(len(boxes)), np.full(len(boxes), -1, dtype=np.int64)
    iou = pairwise_iou(boxes, _gt_boxes(gts))
    idx = iou.argmax(axis=1)
    return iou[np.arange(len(boxes)), idx], idx


@dataclass
class Stage2Assignment:
    positive: np.ndarray  # bool [R]
    gt_index: np.ndarray  # best-overlapping ground truth, -1 if none
    targets: np.ndarray  # [R, m, m] binary mask targets (zero where not positive)


def assign_stage2_samples(boxes, gts, m, positive_iou=0.5, boxes_only=False):
    """Mask targets for RoIs whose best box IoU with a ground truth exceeds ``positive_iou``.

    The target is the ground-truth mask restricted to the RoI and resampled to
    ``m x m``; other RoIs are ignored by the mask loss.  Scenes flagged
    ``boxes_only`` contribute no mask targets.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    best, idx = _match(boxes, gts)
    positive = best > positive_iou
    if boxes_only:
        positive[:] = False
    targets = np.zeros((len(boxes), m, m))
    for r in np.flatnonzero(positive):
        targets[r] = crop_resize_mask(gts[idx[r]].mask, boxes[r], m)
    return Stage2Assignment(positive, idx, targets)


@dataclass
class Stage3Assignment:
    box_labels: np.ndarray  # set 1: category by box IoU, 0 = background
    mask_labels: np.ndarray  # set 2: additionally requires mask IoU
    reg_targets: np.ndarray  # [R, 4] normalised deltas towards the matched box
    reg_weights: np.ndarray  # 1 for set-1 positives
    gt_index: np.ndarray
    mask_ious: np.ndarray


def assign_stage3_samples(boxes, mask_probs, gts, config, height=None, width=None, boxes_only=False):
    """Labels for the box-level and mask-level classifiers plus regression targets.

    ``mask_probs[R, m, m]`` are predicted probabilities; they are rendered into
    the image and binarized at ``config.mask_threshold`` before the mask-IoU
    test.  Only RoIs that already pass the box test need rendering.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    r = len(boxes)
    best, idx = _match(boxes, gts)
    cats = np.array([a.category for a in gts], dtype=np.int64)
    set1 = best >= config.stage3_box_iou
    box_labels = np.where(set1, cats[idx] if len(cats) else 0, 0)
    ious = np.zeros(r)
    if boxes_only:
        mask_labels = box_labels.copy()
    else:
        if gts:
            height = height or gts[0].mask.height
            width = width or gts[0].mask.width
        for i in np.flatnonzero(set1):
            pred = paste_mask(mask_probs[i], boxes[i], height, width) >= config.mask_threshold
            ious[i] = mask_iou(pred, gts[idx[i]].mask)
        mask_labels = np.where(set1 & (ious >= config.stage3_mask_iou), box_labels, 0)
    reg_targets = np.zeros((r, 4))
    if set1.any():
        reg_targets[set1] = encode_boxes(boxes[set1], _gt_boxes(gts)[idx[set1]], config.bbox_std)
    return Stage3Assignment(box_labels, mask_labels, reg_targets, set1.astype(np.float64), idx, ious)
