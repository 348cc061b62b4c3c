"""End-to-end training of the cascade on one image per step.

Discrete decisions (anchor sampling, NMS routing, RoI sampling, label
assignment, the class used for stage-3 box regression) are collected in a
:class:`Routing`.  Passing a filled routing back to :func:`cascade_losses`
replays the same decisions, which is what the finite-difference checks use.
Gradients reach the box coordinates of the selected RoIs but never the
selection itself.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import ops
from ..geometry import clip_boxes, decode_boxes, nms
from ..params import learning_rate, schedule_length, sgd_step
from ..tensor import Tape, Tensor, backward
from .losses import mask_loss, rpn_loss, stage3_loss, total_loss
from .model import anchors_for, backbone, rpn_forward, select_class_deltas, stage2_forward, stage3_forward, warp_boxes
from .sampling import AnchorSample, Stage2Assignment, Stage3Assignment, assign_stage2_samples, assign_stage3_samples, sample_anchors, sample_rois

logger = logging.getLogger(__name__)


@dataclass
class Routing:
    anchors: Optional[AnchorSample] = None
    proposals: Optional[np.ndarray] = None  # anchor indices that survive NMS, best first
    rois: Optional[np.ndarray] = None  # sorted indices into proposals + ground-truth boxes
    stage2: Optional[Stage2Assignment] = None
    stage3: Optional[Stage3Assignment] = None
    regress_classes: Optional[np.ndarray] = None
    stage4: Optional[Stage2Assignment] = None
    stage5: Optional[Stage3Assignment] = None


@dataclass
class CascadeLosses:
    terms: dict = field(default_factory=dict)
    total: Optional[Tensor] = None

    def value(self, *names):
        return float(np.sum([self.terms[n].item() for n in names if n in self.terms]))

    @property
    def l1(self):
        return self.value("rpn_cls", "rpn_reg")

    @property
    def l2(self):
        return self.value("mask", "mask4")

    @property
    def l3(self):
        return self.value("cls_mask", "cls_box", "bbox", "cls_mask5", "cls_box5", "bbox5")


def propose_indices(logits, deltas, anchors, height, width, config, nms_threshold):
    """Anchor indices of the proposals kept by NMS, highest objectness first."""
    boxes = clip_boxes(decode_boxes(anchors, deltas), width, height, config.min_box_size)
    ok = np.flatnonzero((boxes[:, 2] >= config.min_proposal_size) & (boxes[:, 3] >= config.min_proposal_size))
    keep = nms(boxes[ok], logits[ok], nms_threshold, max_keep=config.proposal_count)
    return ok[keep]


def proposal_boxes(deltas, anchors, indices, height, width, config):
    """Decoded, clipped proposal boxes as a tape tensor ``[len(indices), 4]``."""
    base = Tensor(anchors[indices].astype(deltas.dtype))
    return ops.clip_boxes(ops.decode_boxes(base, ops.take(deltas, indices)), width, height, config.min_box_size)


def _stage_pair(params, features, boxes, scene, config, routing, first, second, losses, suffix):
    """Mask stage and classification stage on ``boxes``; fills ``losses``."""
    warped = warp_boxes(features, boxes, config)
    mask_logits = stage2_forward(params, warped, config)
    if getattr(routing, first) is None:
        setattr(routing, first, assign_stage2_samples(
            boxes.data, scene.instances, config.mask_size, config.stage2_positive_iou, scene.boxes_only))
    losses.terms["mask" + suffix] = mask_loss(mask_logits, getattr(routing, first))

    cls_mask, cls_box, deltas = stage3_forward(params, warped, mask_logits, config)
    if getattr(routing, second) is None:
        m = config.mask_size
        probs = 1.0 / (1.0 + np.exp(-mask_logits.data.astype(np.float64)))
        setattr(routing, second, assign_stage3_samples(
            boxes.data, probs.reshape(-1, m, m), scene.instances, config, scene.height, scene.width, scene.boxes_only))
    t = stage3_loss(cls_mask, cls_box, deltas, getattr(routing, second), config.num_categories)
    sfx = "5" if suffix else ""
    losses.terms["cls_mask" + sfx], losses.terms["cls_box" + sfx], losses.terms["bbox" + sfx] = t
    return cls_mask, deltas


def cascade_losses(params, scene, config, rng=None, routing=None):
    """Forward the full training cascade on ``scene``.

    Returns ``(CascadeLosses, Routing)``.  Stages 4 and 5 run when
    ``config.train_stages == 5``.
    """
    routing = routing if routing is not None else Routing()
    rng = rng if rng is not None else np.random.default_rng(0)
    dt = config.np_dtype
    height, width = scene.height, scene.width
    gt_boxes = scene.gt_boxes()
    losses = CascadeLosses()

    features = backbone(params, Tensor(scene.image.astype(dt)), config)
    logits, deltas = rpn_forward(params, features, config)
    anchors = anchors_for(config, features.shape[1], features.shape[2])
    if routing.anchors is None:
        routing.anchors = sample_anchors(anchors, gt_boxes, config, rng)
    losses.terms["rpn_cls"], losses.terms["rpn_reg"] = rpn_loss(logits, deltas, routing.anchors)

    if routing.proposals is None:
        routing.proposals = propose_indices(logits.data, deltas.data, anchors, height, width, config, config.nms_train)
    props = routing.proposals
    if routing.rois is None:
        cand = clip_boxes(decode_boxes(anchors[props], deltas.data[props]), width, height, config.min_box_size)
        if config.include_gt_rois and len(gt_boxes):
            cand = np.concatenate([cand, gt_boxes])
        routing.rois = np.sort(sample_rois(cand, gt_boxes, config, rng))
    picks = routing.rois
    from_props = props[picks[picks < len(props)]]
    parts = []
    if len(from_props):
        parts.append(proposal_boxes(deltas, anchors, from_props, height, width, config))
    from_gt = picks[picks >= len(props)] - len(props)
    if len(from_gt):
        parts.append(Tensor(gt_boxes[from_gt].astype(dt)))

    if parts:
        boxes = ops.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        cls_mask, deltas3 = _stage_pair(params, features, boxes, scene, config, routing, "stage2", "stage3", losses, "")
        if config.train_stages == 5:
            if routing.regress_classes is None:
                routing.regress_classes = cls_mask.data[:, 1:].argmax(axis=1) + 1
            chosen = select_class_deltas(deltas3, routing.regress_classes, config.num_categories)
            boxes4 = ops.clip_boxes(ops.decode_boxes(boxes, chosen, config.bbox_std), width, height, config.min_box_size)
            _stage_pair(params, features, boxes4, scene, config, routing, "stage4", "stage5", losses, "4")

    losses.total = total_loss(*losses.terms.values())
    return losses, routing


def clip_gradients(params, max_norm):
    norm = float(np.sqrt(np.sum([np.sum(np.square(g, dtype=np.float64)) for g in params.grads.values()])))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for k in params.grads:
            params.grads[k] = params.grads[k] * factor
    return norm


def step_rng(seed, iteration):
    return np.random.default_rng(np.random.SeedSequence([int(seed), 11, int(iteration)]))


def train_step(params, scene, config, iteration=0, seed=0):
    """One SGD step on one scene.  Returns a loss report dict."""
    with Tape() as tape:
        losses, _ = cascade_losses(params, scene, config, step_rng(seed, iteration))
    backward(tape, losses.total, params)
    grad_norm = clip_gradients(params, config.grad_clip)
    lr = learning_rate(config.schedule, iteration)
    sgd_step(params, lr, config.momentum, config.weight_decay)
    return {
        "iter": iteration,
        "L1": losses.l1,
        "L2": losses.l2,
        "L3": losses.l3,
        "total": losses.total.item(),
        "lr": lr,
        "grad_norm": grad_norm,
    }


def format_log_line(report):
    return "{iter} {L1:.6f} {L2:.6f} {L3:.6f} {total:.6f} {lr:g}".format(**report)


def scene_order(num_scenes, iterations, seed):
    """Scene index per iteration: a fresh permutation each epoch."""
    order = []
    epoch = 0
    while len(order) < iterations:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 5, epoch]))
        order.extend(rng.permutation(num_scenes).tolist())
        epoch += 1
    return order[:iterations]


def train(params, scenes, config, iterations=None, seed=0, log=None, callback=None):
    """Run ``iterations`` steps (default: the schedule length) and return the reports.

    ``log`` is an open text file receiving one ``iter L1 L2 L3 total lr`` line
    per step; ``callback(report)`` runs after every step.
    """
    if not scenes:
        raise ValueError("cannot train on an empty dataset")
    iterations = schedule_length(config.schedule) if iterations is None else int(iterations)
    reports = []
    start = time.perf_counter()
    for it, idx in enumerate(scene_order(len(scenes), iterations, seed)):
        rep = train_step(params, scenes[idx], config, it, seed)
        if not np.isfinite(rep["total"]):
            raise FloatingPointError(f"loss became non-finite at iteration {it}")
        reports.append(rep)
        if log is not None:
            log.write(format_log_line(rep) + "\n")
        if callback is not None:
            callback(rep)
        if it % 500 == 0:
            logger.info("iter %d total %.4f (%.1fs)", it, rep["total"], time.perf_counter() - start)
    return reports
