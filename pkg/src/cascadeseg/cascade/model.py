"""Network parameters and the forward pass of the backbone and the three stage heads."""

import numpy as np

from .. import ops
from ..geometry import generate_anchors
from ..params import ParameterStore
from ..roi_warp import roi_warp
from ..tensor import ContractError, Tensor


def resize_matrix(src, dst):
    """Bilinear interpolation matrix ``[dst, src]`` sampling at cell centers."""
    pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src - 1)
    frac = pos - i0
    out = np.zeros((dst, src))
    np.add.at(out, (np.arange(dst), i0), 1 - frac)
    np.add.at(out, (np.arange(dst), i1), frac)
    return out


def pooled_sizes(config):
    return config.warp_size // config.stage2_pool, config.warp_size // config.stage3_pool


def init_params(config, seed=0):
    """He-initialised parameters; output layers start near zero."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    store = ParameterStore(config.np_dtype)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    cin = config.image_channels
    for i, (cout, k) in enumerate(zip(config.backbone_channels, config.backbone_kernels)):
        store.add(f"conv{i + 1}.w", he((cout, cin, k, k), cin * k * k))
        store.add(f"conv{i + 1}.b", np.zeros(cout))
        cin = cout
    c = cin
    a = config.anchors_per_position
    store.add("rpn.conv.w", he((config.rpn_channels, c, 3, 3), c * 9))
    store.add("rpn.conv.b", np.zeros(config.rpn_channels))
    store.add("rpn.cls.w", rng.normal(0.0, 0.01, size=(a, config.rpn_channels, 1, 1)))
    store.add("rpn.cls.b", np.zeros(a))
    store.add("rpn.bbox.w", rng.normal(0.0, 0.001, size=(4 * a, config.rpn_channels, 1, 1)))
    store.add("rpn.bbox.b", np.zeros(4 * a))

    p2, p3 = pooled_sizes(config)
    m2 = config.mask_size ** 2
    h2, h3 = config.stage2_hidden, config.stage3_hidden
    store.add("s2.fc.w", he((h2, c * p2 * p2), c * p2 * p2))
    store.add("s2.fc.b", np.zeros(h2))
    store.add("s2.mask.w", rng.normal(0.0, 0.001, size=(m2, h2)))
    store.add("s2.mask.b", np.zeros(m2))

    n1 = config.num_categories + 1
    for path in ("mfc", "bfc"):
        store.add(f"s3.{path}1.w", he((h3, c * p3 * p3), c * p3 * p3))
        store.add(f"s3.{path}1.b", np.zeros(h3))
        store.add(f"s3.{path}2.w", he((h3, h3), h3))
        store.add(f"s3.{path}2.b", np.zeros(h3))
    store.add("s3.cls_mask.w", rng.normal(0.0, 0.01, size=(n1, 2 * h3)))
    store.add("s3.cls_mask.b", np.zeros(n1))
    store.add("s3.cls_box.w", rng.normal(0.0, 0.01, size=(n1, 2 * h3)))
    store.add("s3.cls_box.b", np.zeros(n1))
    store.add("s3.bbox.w", rng.normal(0.0, 0.001, size=(4 * n1, 2 * h3)))
    store.add("s3.bbox.b", np.zeros(4 * n1))
    return store


def check_params(params, config):
    """Raise if ``params`` does not have the layout ``config`` expects."""
    expected = init_params(config, 0)
    missing = [k for k in expected if k not in params]
    wrong = [k for k in expected if k in params and params[k].shape != expected[k].shape]
    if missing or wrong:
        raise ContractError(f"parameters do not fit the configuration (missing {missing[:3]}, mismatched {wrong[:3]})")


def backbone(params, image, config):
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=config.np_dtype))
    for i, (k, s) in enumerate(zip(config.backbone_kernels, config.backbone_strides)):
        x = ops.relu(ops.conv2d(x, params[f"conv{i + 1}.w"], params[f"conv{i + 1}.b"], stride=s, pad=k // 2))
    return x


def rpn_forward(params, features, config):
    """Objectness logits ``[K]`` and deltas ``[K,4]`` for every anchor.

    Anchors are ordered (row, col, anchor) to match :func:`anchors_for`.
    """
    _, hf, wf = features.shape
    a = config.anchors_per_position
    hidden = ops.relu(ops.conv2d(features, params["rpn.conv.w"], params["rpn.conv.b"], stride=1, pad=1))
    logits = ops.conv2d(hidden, params["rpn.cls.w"], params["rpn.cls.b"])
    deltas = ops.conv2d(hidden, params["rpn.bbox.w"], params["rpn.bbox.b"])
    logits = ops.reshape(ops.transpose(logits, (1, 2, 0)), (hf * wf * a,))
    deltas = ops.reshape(ops.transpose(ops.reshape(deltas, (a, 4, hf, wf)), (2, 3, 0, 1)), (hf * wf * a, 4))
    return logits, deltas


_anchor_cache = {}


def anchors_for(config, feature_h, feature_w):
    key = (feature_h, feature_w, config.feature_stride, config.anchor_scales, config.anchor_ratios)
    if key not in _anchor_cache:
        _anchor_cache[key] = generate_anchors(feature_h, feature_w, config.feature_stride, config.anchor_scales, config.anchor_ratios)
    return _anchor_cache[key]


def warp_boxes(features, boxes, config):
    """Warp image-coordinate ``boxes[R,4]`` to ``[R, C, W', W']`` feature crops."""
    if config.box_grad_scale != 1.0:
        boxes = ops.scale_gradient(boxes, config.box_grad_scale)
    feat_boxes = ops.scale(boxes, 1.0 / config.feature_stride)
    return roi_warp(features, feat_boxes, config.warp_size, config.warp_size)


def stage2_forward(params, warped, config):
    """Mask logits ``[R, m*m]`` from warped RoI features."""
    pooled = ops.max_pool2d(warped, config.stage2_pool)
    flat = ops.reshape(pooled, (pooled.shape[0], -1))
    hidden = ops.relu(ops.affine(flat, params["s2.fc.w"], params["s2.fc.b"]))
    return ops.affine(hidden, params["s2.mask.w"], params["s2.mask.b"])


def mask_to_pooled(mask_logits, config):
    """Sigmoid mask probabilities resized from ``m x m`` to the stage-3 pooled size."""
    r = mask_logits.shape[0]
    m = config.mask_size
    _, p3 = pooled_sizes(config)
    probs = ops.reshape(ops.sigmoid(mask_logits), (r, m, m))
    rm = resize_matrix(m, p3)
    return ops.separable_linear(probs, rm, rm)


def masked_features(pooled, mask_small):
    """Feature masking: every channel of ``pooled[R,C,h,w]`` times ``mask_small[R,h,w]``."""
    return ops.mul(pooled, ops.expand(mask_small, 1, pooled.shape[1]))


def stage3_forward(params, warped, mask_logits, config):
    """Class logits of both classifiers ``[R, N+1]`` and class-wise deltas ``[R, 4(N+1)]``."""
    pooled = ops.max_pool2d(warped, config.stage3_pool)
    r = pooled.shape[0]
    masked = masked_features(pooled, mask_to_pooled(mask_logits, config))

    def pathway(x, name):
        x = ops.reshape(x, (r, -1))
        x = ops.relu(ops.affine(x, params[f"s3.{name}1.w"], params[f"s3.{name}1.b"]))
        return ops.relu(ops.affine(x, params[f"s3.{name}2.w"], params[f"s3.{name}2.b"]))

    joint = ops.concat([pathway(masked, "mfc"), pathway(pooled, "bfc")], axis=1)
    cls_mask = ops.affine(joint, params["s3.cls_mask.w"], params["s3.cls_mask.b"])
    cls_box = ops.affine(joint, params["s3.cls_box.w"], params["s3.cls_box.b"])
    deltas = ops.affine(joint, params["s3.bbox.w"], params["s3.bbox.b"])
    return cls_mask, cls_box, deltas


def select_class_deltas(deltas, classes, num_categories):
    """Rows of ``deltas[R, 4(N+1)]`` for one class per RoI, as ``[R, 4]``."""
    r = deltas.shape[0]
    flat = ops.reshape(deltas, (r * (num_categories + 1), 4))
    return ops.take(flat, np.arange(r) * (num_categories + 1) + np.asarray(classes, dtype=np.intp))
