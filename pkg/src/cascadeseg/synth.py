"""Deterministic synthetic scenes of occluding shapes, and the dataset file format."""

import dataclasses
import json
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .geometry import BinaryMask, Box

SHAPES = ("disk", "rectangle")
DATASET_MAGIC = "CSEGDATA"
DATASET_VERSION = 1


@dataclass
class DatasetSpec:
    num_scenes: int = 100
    height: int = 96
    width: int = 96
    channels: int = 1
    categories: tuple = SHAPES
    min_instances: int = 1
    max_instances: int = 4
    disk_radius: tuple = (7.0, 16.0)
    rect_size: tuple = (12.0, 32.0)
    noise: float = 0.05
    adjacency: float = 0.3  # chance a shape is placed touching an earlier one of its category
    max_occlusion: float = 0.5  # largest fraction of an instance that later shapes may hide
    min_visible: int = 30
    seed: int = 0

    def __post_init__(self):
        self.categories = tuple(self.categories)
        self.disk_radius = tuple(self.disk_radius)
        self.rect_size = tuple(self.rect_size)
        unknown = [c for c in self.categories if c not in SHAPES]
        if unknown or not self.categories:
            raise ValueError(f"categories must be drawn from {SHAPES}, got {self.categories}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError("need 1 <= min_instances <= max_instances")

    @property
    def num_categories(self):
        return len(self.categories)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ValueError(f"unknown dataset spec keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class Annotation:
    category: int
    mask: BinaryMask
    box: Box


@dataclass
class Scene:
    id: str
    image: np.ndarray  # [C, H, W] in [0, 1]
    instances: List[Annotation] = field(default_factory=list)
    boxes_only: bool = False

    @property
    def height(self):
        return self.image.shape[1]

    @property
    def width(self):
        return self.image.shape[2]

    def gt_boxes(self):
        return np.array([tuple(a.box) for a in self.instances], dtype=np.float64).reshape(-1, 4)

    def gt_categories(self):
        return np.array([a.category for a in self.instances], dtype=np.int64)


# ----------------------------------------------------------------------------
# rasterization


def rasterize(shape, height, width):
    """Pixels whose centers lie inside ``shape`` (a dict with a ``kind`` key)."""
    cy = np.arange(height)[:, None] + 0.5
    cx = np.arange(width)[None, :] + 0.5
    if shape["kind"] == "disk":
        return (cx - shape["x"]) ** 2 + (cy - shape["y"]) ** 2 < shape["r"] ** 2
    if shape["kind"] == "rectangle":
        return (cx >= shape["x0"]) & (cx < shape["x1"]) & (cy >= shape["y0"]) & (cy < shape["y1"])
    raise ValueError(f"unknown shape kind {shape['kind']!r}")


def _extent(shape):
    if shape["kind"] == "disk":
        return shape["x"] - shape["r"], shape["y"] - shape["r"], shape["x"] + shape["r"], shape["y"] + shape["r"]
    return shape["x0"], shape["y0"], shape["x1"], shape["y1"]


def _inside(shape, height, width):
    x0, y0, x1, y1 = _extent(shape)
    return x0 >= 0 and y0 >= 0 and x1 <= width and y1 <= height


def _sample_shape(rng, kind, spec):
    h, w = spec.height, spec.width
    if kind == "disk":
        r = rng.uniform(*spec.disk_radius)
        return {"kind": kind, "r": r, "x": rng.uniform(r, w - r), "y": rng.uniform(r, h - r)}
    sw, sh = rng.uniform(*spec.rect_size, size=2)
    x0, y0 = rng.uniform(0, w - sw), rng.uniform(0, h - sh)
    return {"kind": kind, "x0": x0, "y0": y0, "x1": x0 + sw, "y1": y0 + sh}


def _touching(rng, kind, other, spec):
    """A new ``kind`` shape placed flush against ``other`` (same kind)."""
    fresh = _sample_shape(rng, kind, spec)
    if kind == "disk":
        angle = rng.uniform(0, 2 * np.pi)
        dist = other["r"] + fresh["r"]
        fresh["x"] = other["x"] + dist * np.cos(angle)
        fresh["y"] = other["y"] + dist * np.sin(angle)
        return fresh
    sw, sh = fresh["x1"] - fresh["x0"], fresh["y1"] - fresh["y0"]
    side = rng.integers(4)
    if side < 2:
        x0 = other["x1"] if side == 0 else other["x0"] - sw
        y0 = rng.uniform(other["y0"] - sh / 2, other["y1"] - sh / 2)
    else:
        y0 = other["y1"] if side == 2 else other["y0"] - sh
        x0 = rng.uniform(other["x0"] - sw / 2, other["x1"] - sw / 2)
    return {"kind": kind, "x0": x0, "y0": y0, "x1": x0 + sw, "y1": y0 + sh}


def compose(shapes, height, width):
    """Visible masks of ``shapes`` drawn back to front (later shapes occlude)."""
    full = [rasterize(s, height, width) for s in shapes]
    visible = []
    for i, m in enumerate(full):
        vis = m.copy()
        for later in full[i + 1:]:
            vis &= ~later
        visible.append(vis)
    return full, visible


def _intensities(rng, n, background):
    levels = []
    while len(levels) < n:
        v = rng.uniform(0.35, 1.0)
        if abs(v - background) >= 0.2 and all(abs(v - u) >= 0.08 for u in levels):
            levels.append(v)
    return levels


def _scene_rng(spec, index):
    return np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(index)]))


def generate_scene(spec, index):
    """Scene ``index`` of the dataset described by ``spec``; pure in ``(spec, index)``."""
    if not 0 <= index < spec.num_scenes:
        raise IndexError(f"scene index {index} outside 0..{spec.num_scenes - 1}")
    rng = _scene_rng(spec, index)
    h, w = spec.height, spec.width
    count = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    shapes, cats = [], []
    for _ in range(count):
        for _attempt in range(30):
            if shapes and rng.uniform() < spec.adjacency:
                j = int(rng.integers(len(shapes)))
                cat = cats[j]
                cand = _touching(rng, spec.categories[cat - 1], shapes[j], spec)
            else:
                cat = int(rng.integers(1, spec.num_categories + 1))
                cand = _sample_shape(rng, spec.categories[cat - 1], spec)
            if not _inside(cand, h, w):
                continue
            full, vis = compose(shapes + [cand], h, w)
            if all(v.sum() >= max(spec.min_visible, (1 - spec.max_occlusion) * f.sum()) for f, v in zip(full, vis)):
                shapes.append(cand)
                cats.append(cat)
                break

    full, visible = compose(shapes, h, w)
    background = rng.uniform(0.0, 0.25)
    levels = _intensities(rng, len(shapes), background)
    base = np.full((h, w), background)
    for m, level in zip(full, levels):
        base[m] = level
    image = np.repeat(base[None], spec.channels, axis=0)
    if spec.noise > 0:
        image = image + rng.normal(0.0, spec.noise, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    instances = []
    for cat, vis in zip(cats, visible):
        mask = BinaryMask(vis)
        instances.append(Annotation(cat, mask, mask.tight_box()))
    return Scene(f"scene-{spec.seed}-{index:05d}", image, instances)


def generate_dataset(spec):
    return [generate_scene(spec, i) for i in range(spec.num_scenes)]


# ----------------------------------------------------------------------------
# dataset file


class DatasetParseError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_dataset(scenes, path, spec=None):
    """Write scenes: text header and annotations, raw little-endian image bytes."""
    echo = json.dumps(spec.to_dict() if spec is not None else None, sort_keys=True)
    out = [f"{DATASET_MAGIC} {DATASET_VERSION}\n".encode(), f"spec {echo}\n".encode(), f"scenes {len(scenes)}\n".encode()]
    for s in scenes:
        img = np.asarray(s.image)
        dtype = np.dtype(img.dtype).newbyteorder("<")
        c, h, w = img.shape
        out.append(f"scene {s.id} {int(s.boxes_only)} {c} {h} {w} {dtype.str} {len(s.instances)}\n".encode())
        for a in s.instances:
            box = " ".join(repr(float(v)) for v in a.box)
            out.append(f"inst {a.category} {box} {a.mask.to_rle()}\n".encode())
        raw = np.ascontiguousarray(img, dtype=dtype).tobytes()
        out.append(f"image {len(raw)}\n".encode())
        out.append(raw)
        out.append(b"\n")
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def line(self):
        end = self.buf.find(b"\n", self.pos)
        if end < 0:
            raise DatasetParseError("unexpected end of file", self.pos)
        start, self.pos = self.pos, end + 1
        try:
            return self.buf[start:end].decode("ascii"), start
        except UnicodeDecodeError:
            raise DatasetParseError("non-text header line", start) from None

    def fields(self, tag, count=None):
        text, start = self.line()
        parts = text.split(" ")
        if parts[0] != tag or (count is not None and len(parts) != count):
            raise DatasetParseError(f"expected {tag!r} record, got {text[:40]!r}", start)
        return parts, start

    def raw(self, n):
        if self.pos + n > len(self.buf):
            raise DatasetParseError(f"image data truncated: needed {n} bytes", self.pos)
        piece = self.buf[self.pos:self.pos + n]
        self.pos += n
        return piece


def load_dataset(path):
    """Read the scenes of a dataset file."""
    return read_dataset(path)[0]


def read_dataset(path):
    """Read a dataset file.  Returns ``(scenes, spec_or_None)``."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    head, start = rd.line()
    if head != f"{DATASET_MAGIC} {DATASET_VERSION}":
        raise DatasetParseError(f"bad header {head[:40]!r}", start)
    text, start = rd.line()
    if not text.startswith("spec "):
        raise DatasetParseError("missing spec line", start)
    try:
        echo = json.loads(text[5:])
    except json.JSONDecodeError:
        raise DatasetParseError("malformed spec echo", start) from None
    spec = DatasetSpec.from_dict(echo) if echo is not None else None
    (_, n), start = rd.fields("scenes", 2)
    scenes = []
    for _ in range(int(n)):
        parts, start = rd.fields("scene", 8)
        try:
            _, sid, flag, c, h, w, dstr, ninst = parts
            c, h, w, ninst = int(c), int(h), int(w), int(ninst)
            dtype = np.dtype(dstr)
        except (ValueError, TypeError):
            raise DatasetParseError(f"malformed scene record {' '.join(parts)[:60]!r}", start) from None
        instances = []
        for _ in range(ninst):
            text, istart = rd.line()
            parts = text.split(" ", 6)
            try:
                if parts[0] != "inst":
                    raise ValueError
                box = Box(*(float(v) for v in parts[2:6]))
                mask = BinaryMask.from_rle(parts[6])
                instances.append(Annotation(int(parts[1]), mask, box))
            except (ValueError, IndexError):
                raise DatasetParseError(f"malformed instance record {text[:60]!r}", istart) from None
        (_, nbytes), istart = rd.fields("image", 2)
        if int(nbytes) != c * h * w * dtype.itemsize:
            raise DatasetParseError("image size does not match its header", istart)
        image = np.frombuffer(rd.raw(int(nbytes)), dtype=dtype).reshape(c, h, w).astype(dtype.newbyteorder("="))
        end = rd.raw(1) if rd.pos < len(rd.buf) else b""
        if end != b"\n":
            raise DatasetParseError("missing record terminator", rd.pos)
        scenes.append(Scene(sid, image, instances, bool(int(flag))))
    if rd.pos != len(rd.buf):
        raise DatasetParseError("trailing data after last scene", rd.pos)
    return scenes, spec
