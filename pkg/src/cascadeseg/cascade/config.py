"""Cascade configuration and its ``key = value`` file format."""

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from ..params import DEFAULT_SCHEDULE


@dataclass
class CascadeConfig:
    num_categories: int = 2
    image_channels: int = 1
    mask_size: int = 28
    warp_size: int = 28
    stage2_pool: int = 2
    stage3_pool: int = 4

    # routing and sampling
    proposal_count: int = 300
    nms_train: float = 0.7
    nms_infer: float = 0.7
    min_proposal_size: float = 2.0
    min_box_size: float = 1.0
    anchor_scales: tuple = (8.0, 16.0, 32.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    anchors_per_image: int = 256
    rpn_positive_fraction: float = 0.5
    rpn_positive_iou: float = 0.7
    rpn_negative_iou: float = 0.3
    rois_per_image: int = 64
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_bg_iou_low: float = 0.0
    include_gt_rois: bool = True
    stage2_positive_iou: float = 0.5
    stage3_box_iou: float = 0.5
    stage3_mask_iou: float = 0.5
    bbox_std: tuple = (0.1, 0.1, 0.2, 0.2)
    box_grad_scale: float = 1.0  # multiplies gradients reaching RoI box coordinates through the warp

    # network widths (desk scale)
    backbone_channels: tuple = (16, 32, 32)
    backbone_kernels: tuple = (5, 5, 3)
    backbone_strides: tuple = (2, 2, 1)
    rpn_channels: int = 32
    stage2_hidden: int = 64
    stage3_hidden: int = 64

    # optimization
    schedule: tuple = DEFAULT_SCHEDULE
    momentum: float = 0.0
    weight_decay: float = 0.0
    grad_clip: float = 0.0
    train_stages: int = 3
    dtype: str = "float32"
    shorter_side: int = 0  # resize images to this shorter side; 0 keeps them as they are

    # inference
    vote_nms: float = 0.3
    vote_iou: float = 0.5
    mask_threshold: float = 0.5
    min_score: float = 0.001
    max_detections: int = 100

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (list, tuple)):
                setattr(self, f.name, _tuplify(v))
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        if self.mask_size < 2:
            raise ValueError("mask_size must be >= 2")
        if self.train_stages not in (3, 5):
            raise ValueError("train_stages must be 3 or 5")
        if self.warp_size % self.stage2_pool or self.warp_size % self.stage3_pool:
            raise ValueError("pool windows must divide warp_size")
        if len(self.backbone_channels) != len(self.backbone_kernels) or len(self.backbone_kernels) != len(self.backbone_strides):
            raise ValueError("backbone_channels, backbone_kernels and backbone_strides differ in length")

    @property
    def feature_stride(self):
        return int(np.prod(self.backbone_strides))

    @property
    def anchors_per_position(self):
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        lines = [f"{f.name} = {json.dumps(getattr(self, f.name))}" for f in dataclasses.fields(self)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        return cls(**parse_key_values(text, cls))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_text(fh.read())


def _tuplify(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuplify(x) for x in v)
    return v


def parse_key_values(text, cls):
    """Parse ``key = json-value`` lines into a dict of fields of dataclass ``cls``."""
    names = {f.name for f in dataclasses.fields(cls)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in names:
            raise ValueError(f"line {lineno}: unknown or malformed entry {raw.strip()!r}")
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError:
            out[key] = value.strip()
    return out


def desk_config(**overrides):
    """Settings used for the synthetic-shapes training runs."""
    cfg = CascadeConfig(
        schedule=((0.01, 2400), (0.001, 600)),
        momentum=0.9,
        weight_decay=1e-4,
        grad_clip=10.0,
        train_stages=5,
        box_grad_scale=0.05,
    )
    return cfg.replace(**overrides)


def tiny_config(**overrides):
    """A small float64 cascade for gradient checks (8-channel features, m = 8, W' = 8)."""
    cfg = CascadeConfig(
        mask_size=8,
        warp_size=8,
        stage2_pool=2,
        stage3_pool=4,
        backbone_channels=(4, 8, 8),
        rpn_channels=8,
        stage2_hidden=8,
        stage3_hidden=8,
        proposal_count=40,
        anchors_per_image=32,
        rois_per_image=8,
        train_stages=5,
        dtype="float64",
    )
    return cfg.replace(**overrides)
