"""Mask-level (mAP^r) and box-level (mAP^b) average precision.

Matching is greedy in descending score order: each prediction takes the
still-unmatched ground truth of its category with the highest IoU and counts
as a true positive when that IoU reaches the threshold.  AP is the area under
the precision envelope over all recall points.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .geometry import _bits, pairwise_iou
from .inference import instance_box

DEFAULT_THRESHOLDS = (0.5, 0.7)
COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())


class EvaluationInputError(ValueError):
    """Predictions refer to scenes or categories the dataset does not have."""


@dataclass
class MatchResult:
    scores: np.ndarray  # per prediction, in the order they were matched
    tp: np.ndarray  # bool per prediction
    gt_matched: np.ndarray  # bool per ground truth
    gt_index: np.ndarray = field(default=None)  # matched ground truth per prediction, -1 for FP

    @property
    def fp(self):
        return ~self.tp


def score_order(scores):
    """Descending score order; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def greedy_match(ious, scores, iou_threshold):
    """Match predictions (rows of ``ious``) to ground truths (columns) greedily.

    Predictions are visited by descending score.  Returns a :class:`MatchResult`
    whose arrays follow that visiting order.
    """
    ious = np.asarray(ious, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    p, g = ious.shape if ious.ndim == 2 else (len(scores), 0)
    order = score_order(scores)
    taken = np.zeros(g, dtype=bool)
    tp = np.zeros(p, dtype=bool)
    which = np.full(p, -1, dtype=np.int64)
    for rank, i in enumerate(order):
        if g == 0:
            break
        avail = np.where(taken, -np.inf, ious[i])
        j = int(np.argmax(avail))
        if not taken[j] and avail[j] >= iou_threshold:
            taken[j] = True
            tp[rank] = True
            which[rank] = j
    return MatchResult(scores[order], tp, taken, which)


def _masks_iou(pred_masks, gt_masks):
    if not len(pred_masks) or not len(gt_masks):
        return np.zeros((len(pred_masks), len(gt_masks)))
    a = np.stack([m.reshape(-1) for m in pred_masks]).astype(np.float64)
    b = np.stack([m.reshape(-1) for m in gt_masks]).astype(np.float64)
    inter = a @ b.T
    union = a.sum(1)[:, None] + b.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def instance_ious(preds, gts, kind="mask", shape=None):
    """IoU matrix ``[len(preds), len(gts)]`` by mask or by box."""
    if kind == "box":
        pb = np.array([instance_box(p) for p in preds], dtype=np.float64).reshape(-1, 4)
        gb = np.array([tuple(g.box) for g in gts], dtype=np.float64).reshape(-1, 4)
        return pairwise_iou(pb, gb) if len(pb) and len(gb) else np.zeros((len(pb), len(gb)))
    if kind != "mask":
        raise ValueError(f"kind must be 'mask' or 'box', got {kind!r}")
    gt_masks = [_bits(g.mask) for g in gts]
    if shape is None and gt_masks:
        shape = gt_masks[0].shape
    pred_masks = []
    for p in preds:
        if p.mask is None:
            pred_masks.append(np.zeros(shape, dtype=bool))
            continue
        bits = _bits(p.mask)
        if shape is not None and bits.shape != shape:
            raise EvaluationInputError(f"predicted mask {bits.shape[1]}x{bits.shape[0]} does not fit image {shape[1]}x{shape[0]}")
        pred_masks.append(bits)
    return _masks_iou(pred_masks, gt_masks)


def match_instances(preds, gts, iou_threshold, kind="mask"):
    """Greedy matching of one category's predictions to its ground truths in one scene."""
    return greedy_match(instance_ious(preds, gts, kind), [p.score for p in preds], iou_threshold)


def average_precision(match, num_gt) -> Optional[float]:
    """All-point AP of a match result (or results concatenated across scenes).

    Returns ``None`` when there is neither a ground truth nor a prediction,
    and 0 when only predictions exist.
    """
    tp = np.asarray(match.tp, dtype=bool)
    if num_gt == 0:
        return None if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    order = score_order(match.scores)
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    rec = np.concatenate([[0.0], recall, [1.0]])
    prec = np.concatenate([[0.0], precision, [0.0]])
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    steps = np.flatnonzero(rec[1:] != rec[:-1])
    return float(np.sum((rec[steps + 1] - rec[steps]) * prec[steps + 1]))


def merge_matches(results: Sequence[MatchResult]) -> MatchResult:
    if not results:
        return MatchResult(np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0, dtype=bool), np.zeros(0, dtype=np.int64))
    return MatchResult(
        np.concatenate([r.scores for r in results]),
        np.concatenate([r.tp for r in results]),
        np.concatenate([r.gt_matched for r in results]),
        np.concatenate([r.gt_index for r in results]),
    )


@dataclass
class MapResult:
    kind: str
    thresholds: tuple
    categories: List[int]
    ap: Dict[int, Dict[float, Optional[float]]]  # category -> threshold -> AP (None without data)
    mean: Dict[float, float]


def _check_predictions(predictions, scenes, num_categories):
    known = {s.id for s in scenes}
    for scene_id, insts in predictions.items():
        if scene_id not in known:
            raise EvaluationInputError(f"unknown scene id {scene_id!r} in predictions")
        for inst in insts:
            if not 1 <= int(inst.category) <= num_categories:
                raise EvaluationInputError(f"unknown category {inst.category} in a prediction for scene {scene_id!r}")


def evaluate_map(predictions, scenes, thresholds=DEFAULT_THRESHOLDS, kind="mask", num_categories=None) -> MapResult:
    """Per-category AP at each threshold and the mean over categories with ground truth.

    ``predictions`` maps scene id to final instances.  Scenes without an entry
    have no predictions.
    """
    if num_categories is None:
        num_categories = max([a.category for s in scenes for a in s.instances], default=0)
    _check_predictions(predictions, scenes, num_categories)
    thresholds = tuple(float(t) for t in thresholds)
    per = {c: {t: [] for t in thresholds} for c in range(1, num_categories + 1)}
    num_gt = {c: 0 for c in per}
    for scene in scenes:
        preds = predictions.get(scene.id, [])
        for c in per:
            p = [x for x in preds if int(x.category) == c]
            g = [a for a in scene.instances if a.category == c]
            num_gt[c] += len(g)
            if not p:
                continue
            ious = instance_ious(p, g, kind, shape=(scene.height, scene.width))
            scores = [x.score for x in p]
            for t in thresholds:
                per[c][t].append(greedy_match(ious, scores, t))
    ap = {c: {t: average_precision(merge_matches(per[c][t]), num_gt[c]) for t in thresholds} for c in per}
    with_gt = [c for c in per if num_gt[c] > 0]
    mean = {t: float(np.mean([ap[c][t] for c in with_gt])) if with_gt else 0.0 for t in thresholds}
    return MapResult(kind, thresholds, with_gt, ap, mean)


def coco_map(predictions, scenes, kind="mask", num_categories=None):
    """mAP averaged over IoU thresholds 0.50:0.05:0.95."""
    res = evaluate_map(predictions, scenes, COCO_THRESHOLDS, kind, num_categories)
    return float(np.mean(list(res.mean.values())))


def _tag(kind):
    return "r" if kind == "mask" else "b"


def format_report(results: Sequence[MapResult], category_names=None, extra=None):
    """Aligned table followed by a ``key = value`` block."""
    names = category_names or {}
    cols = [(r, t) for r in results for t in r.thresholds]
    head = ["category"] + [f"AP^{_tag(r.kind)}@{t:g}" for r, t in cols]
    cats = sorted({c for r in results for c in r.categories})
    rows = []
    for c in cats:
        label = names.get(c, str(c))
        vals = [r.ap[c][t] for r, t in cols]
        rows.append([label] + ["-" if v is None else f"{v:.3f}" for v in vals])
    rows.append(["mean"] + [f"{r.mean[t]:.3f}" for r, t in cols])
    widths = [max(len(row[i]) for row in [head] + rows) for i in range(len(head))]
    lines = ["  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths))) for row in [head] + rows]
    lines.append("")
    for r, t in cols:
        tag = _tag(r.kind)
        lines.append(f"mAP_{tag}@{t:g} = {r.mean[t]:.6f}")
        for c in cats:
            v = r.ap[c][t]
            lines.append(f"AP_{tag}@{t:g}[{names.get(c, c)}] = {'nan' if v is None else f'{v:.6f}'}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v:.6f}")
    return "\n".join(lines) + "\n"


def parse_report(text):
    """Numeric ``key = value`` lines of a report as a dict; other lines are skipped."""
    out = {}
    for line in text.splitlines():
        key, sep, value = line.partition(" = ")
        if not sep:
            continue
        try:
            out[key.strip()] = float(value)
        except ValueError:
            continue
    return out
