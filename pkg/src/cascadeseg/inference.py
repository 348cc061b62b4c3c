"""Five-stage inference, mask voting and the prediction file format.

A forward pass runs stages 2-3 on the proposals, regresses every proposal
with the deltas of its best non-background category, and runs stages 4-5 on
the regressed boxes.  Both instance sets are concatenated and merged per
category by :func:`mask_voting`.
"""

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import ops
from .cascade.model import anchors_for, backbone, check_params, rpn_forward, stage2_forward, stage3_forward, warp_boxes
from .cascade.train import propose_indices
from .geometry import BinaryMask, clip_boxes, decode_boxes, nms, pairwise_iou, paste_mask, tight_box
from .tensor import Tensor

SEGMENTS = ("conv", "stage 2", "stage 3", "stage 4", "stage 5", "others")
PREDICTIONS_HEADER = "# cascadeseg predictions v1: scene category score x y w h rle"


@dataclass
class Instance:
    box: np.ndarray  # (x, y, w, h) in image coordinates
    category: int
    score: float
    probs: Optional[np.ndarray] = None  # m x m mask probabilities inside ``box``
    mask: Optional[BinaryMask] = None  # binarized image-resolution mask
    class_scores: Optional[np.ndarray] = None  # softmax over background + categories (raw instances)


class Timer:
    """Accumulates wall-clock seconds per named segment."""

    def __init__(self):
        self.seconds = {name: 0.0 for name in SEGMENTS}

    @contextmanager
    def __call__(self, name):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] = self.seconds.get(name, 0.0) + time.perf_counter() - start


def _timer(timer):
    return timer if timer is not None else Timer()


def propose(params, features, config, height, width):
    """Up to ``proposal_count`` boxes after NMS, and their objectness, best first."""
    logits, deltas = rpn_forward(params, features, config)
    anchors = anchors_for(config, features.shape[1], features.shape[2])
    keep = propose_indices(logits.data, deltas.data, anchors, height, width, config, config.nms_infer)
    boxes = clip_boxes(decode_boxes(anchors[keep], deltas.data[keep].astype(np.float64)), width, height, config.min_box_size)
    scores = 1.0 / (1.0 + np.exp(-logits.data[keep].astype(np.float64)))
    return boxes, scores


def _mask_and_classify(params, features, boxes, config, timer, mask_stage, cls_stage):
    with timer(mask_stage):
        warped = warp_boxes(features, Tensor(boxes.astype(features.dtype)), config)
        mask_logits = stage2_forward(params, warped, config)
    with timer(cls_stage):
        cls_mask, _, deltas = stage3_forward(params, warped, mask_logits, config)
    m = config.mask_size
    probs = ops._sigmoid(mask_logits.data.astype(np.float64)).reshape(-1, m, m)
    scores = ops._softmax(cls_mask.data.astype(np.float64), axis=1)
    return probs, scores, deltas.data.astype(np.float64)


def regress_boxes(boxes, class_scores, deltas, config, width, height):
    """Apply each box's deltas for its highest-scoring non-background category."""
    n1 = config.num_categories + 1
    best = class_scores[:, 1:].argmax(axis=1) + 1
    chosen = deltas.reshape(len(boxes), n1, 4)[np.arange(len(boxes)), best]
    return clip_boxes(decode_boxes(boxes, chosen, config.bbox_std), width, height, config.min_box_size)


def run_cascade_inference(params, image, config, timer=None):
    """Raw instances of the five-stage forward pass (300 + 300 for 300 proposals)."""
    check_params(params, config)
    timer = _timer(timer)
    image = np.asarray(image)
    _, height, width = image.shape
    with timer("conv"):
        features = backbone(params, Tensor(image.astype(config.np_dtype)), config)
    with timer("others"):
        boxes, _ = propose(params, features, config, height, width)
    if len(boxes) == 0:
        return []
    probs3, scores3, deltas3 = _mask_and_classify(params, features, boxes, config, timer, "stage 2", "stage 3")
    with timer("others"):
        boxes4 = regress_boxes(boxes, scores3, deltas3, config, width, height)
    probs5, scores5, _ = _mask_and_classify(params, features, boxes4, config, timer, "stage 4", "stage 5")

    out = []
    for bxs, probs, scores in ((boxes, probs3, scores3), (boxes4, probs5, scores5)):
        for i in range(len(bxs)):
            best = int(scores[i, 1:].argmax()) + 1
            out.append(Instance(bxs[i].copy(), best, float(scores[i, best]), probs[i], None, scores[i]))
    return out


def mask_voting(raw, config, height, width):
    """Per-category NMS followed by score-weighted averaging of rendered masks.

    For each category, instances are scored by that category's probability.
    Every NMS survivor takes the weighted mean of the pasted probability maps
    of all candidates whose box IoU with it is at least ``config.vote_iou``
    (itself included).  The mean is binarized at ``config.mask_threshold``;
    survivors whose merged mask is empty are dropped.  Scores are unchanged.
    """
    if not raw:
        return []
    boxes = np.array([inst.box for inst in raw], dtype=np.float64)
    class_scores = np.array([inst.class_scores for inst in raw], dtype=np.float64)
    pasted: Dict[int, np.ndarray] = {}

    def rendered(i):
        if i not in pasted:
            pasted[i] = paste_mask(raw[i].probs, boxes[i], height, width)
        return pasted[i]

    results = []
    for c in range(1, class_scores.shape[1]):
        scores = class_scores[:, c]
        cand = np.flatnonzero(scores >= config.min_score)
        if cand.size == 0:
            continue
        keep = cand[nms(boxes[cand], scores[cand], config.vote_nms)]
        overlaps = pairwise_iou(boxes[keep], boxes[cand])
        for row, k in enumerate(keep):
            voters = cand[overlaps[row] >= config.vote_iou]
            if k not in voters:
                voters = np.append(voters, k)
            w = scores[voters]
            merged = np.sum([wi * rendered(j) for wi, j in zip(w, voters)], axis=0) / w.sum()
            bits = merged >= config.mask_threshold
            if not bits.any():
                continue
            results.append(Instance(boxes[k].copy(), c, float(scores[k]), raw[k].probs, BinaryMask(bits)))
    results.sort(key=lambda inst: -inst.score)
    return results[: config.max_detections]


def infer_scene(params, scene, config, timer=None):
    timer = _timer(timer)
    raw = run_cascade_inference(params, scene.image, config, timer)
    with timer("others"):
        return mask_voting(raw, config, scene.height, scene.width)


def infer_dataset(params, scenes, config, timer=None):
    """``{scene id: final instances}`` in dataset order."""
    return {scene.id: infer_scene(params, scene, config, timer) for scene in scenes}


# ----------------------------------------------------------------------------
# prediction file


class PredictionParseError(ValueError):
    pass


def _fmt(v):
    return repr(float(v))


def format_prediction(scene_id, inst):
    box = " ".join(_fmt(v) for v in inst.box)
    rle = inst.mask.to_rle() if inst.mask is not None else "-"
    return f"{scene_id}\t{int(inst.category)}\t{_fmt(inst.score)}\t{box}\t{rle}"


def write_predictions(predictions, path):
    """One line per instance; scenes in the given order, descending score within a scene."""
    with open(path, "w") as fh:
        fh.write(PREDICTIONS_HEADER + "\n")
        for scene_id, instances in predictions.items():
            order = sorted(range(len(instances)), key=lambda i: -instances[i].score)
            for i in order:
                fh.write(format_prediction(scene_id, instances[i]) + "\n")


def read_predictions(path) -> Dict[str, List[Instance]]:
    out: Dict[str, List[Instance]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if len(parts) != 5:
                    raise ValueError(f"expected 5 tab-separated fields, got {len(parts)}")
                box = np.array([float(v) for v in parts[3].split()])
                if box.shape != (4,):
                    raise ValueError("box needs 4 numbers")
                mask = None if parts[4].strip() == "-" else BinaryMask.from_rle(parts[4])
                inst = Instance(box, int(parts[1]), float(parts[2]), None, mask)
            except ValueError as err:
                raise PredictionParseError(f"{path}:{lineno}: {err}") from err
            out.setdefault(parts[0], []).append(inst)
    return out


def instance_box(inst):
    """Tight box of the binarized mask when present, else the predicted box."""
    if inst.mask is not None:
        tb = tight_box(inst.mask.bits)
        if tb is not None:
            return np.array(tb, dtype=np.float64)
    return np.asarray(inst.box, dtype=np.float64)
