"""Finite-difference checks of the analytic gradients.

Four suites: the RoI warp (feature map and box coordinates), the feature
masking layer with its mask resize, the loss terms, and the full cascade
objective on a tiny float64 network with frozen routing.  Each returns a
:class:`SuiteResult` with the largest relative error per quantity.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Tuple

import numpy as np

from . import ops
from .cascade.config import tiny_config
from .cascade.losses import mask_loss
from .cascade.model import init_params, mask_to_pooled, masked_features
from .cascade.sampling import Stage2Assignment
from .cascade.train import cascade_losses
from .roi_warp import target_offsets, warp_rois, warp_rois_backward
from .synth import DatasetSpec, generate_scene
from .tensor import Tape, Tensor, backward

WARP_BOX_TOL = 1e-4
WARP_FEATURE_TOL = 1e-6
LAYER_TOL = 1e-6
END_TO_END_TOL = 1e-3


@dataclass
class SuiteResult:
    name: str
    errors: Dict[str, Tuple[float, float]] = field(default_factory=dict)  # quantity -> (max error, tolerance)
    seconds: float = 0.0
    cases: int = 0

    @property
    def passed(self):
        return all(err <= tol for err, tol in self.errors.values())

    def record(self, quantity, error, tol):
        prev = self.errors.get(quantity, (0.0, tol))[0]
        self.errors[quantity] = (max(prev, float(error)), tol)

    def lines(self):
        out = []
        for q, (err, tol) in self.errors.items():
            status = "ok" if err <= tol else "FAIL"
            out.append(f"{self.name:<12} {q:<28} max_rel_err={err:.3e}  tol={tol:.0e}  {status}")
        return out


def rel_error(analytic, numeric, floor=1e-8):
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def central_difference(f: Callable[[], float], array, index, step):
    """``(f(x+h) - f(x-h)) / 2h`` for one entry of ``array``, restored afterwards."""
    old = array[index]
    array[index] = old + step
    up = f()
    array[index] = old - step
    down = f()
    array[index] = old
    return (up - down) / (2 * step)


# ----------------------------------------------------------------------------
# RoI warp


def kink_distance(box, out_h, out_w):
    """Distance from the nearest interpolation kink over all sample positions of ``box``."""
    x, y, w, h = box
    px = x + target_offsets(out_w) / out_w * w
    py = y + target_offsets(out_h) / out_h * h
    pos = np.concatenate([px, py])
    return float(np.min(np.abs(pos - np.round(pos))))


def _axis_away_from_kinks(rng, n, size, margin):
    """Center and extent whose ``n`` samples all sit at least ``margin`` off the integer grid."""
    spacing = int(rng.integers(1, 3))
    slack = 0.5 - margin
    jitter = rng.uniform(-slack / 2, slack / 2) / max(n / 2, 1)
    start = int(rng.integers(0, max(size - spacing * n, 1)))
    offset = rng.uniform(-slack / 2, slack / 2)
    center = start + spacing * (n // 2) + 0.5 + offset
    return center, n * (spacing + jitter)


def random_warp_case(rng, margin=0.3):
    """A random ``(features, box, out_h, out_w)`` whose samples avoid the kinks by ``margin``."""
    c = int(rng.integers(1, 4))
    h, w = (int(v) for v in rng.integers(6, 16, size=2))
    out_h, out_w = (int(v) for v in rng.integers(2, 8, size=2))
    x, bw = _axis_away_from_kinks(rng, out_w, w, margin)
    y, bh = _axis_away_from_kinks(rng, out_h, h, margin)
    features = rng.normal(size=(c, h, w))
    return features, np.array([x, y, bw, bh]), out_h, out_w


def check_roi_warp(trials=100, seed=0, step=1e-4, feature_entries=48):
    """Analytic warp gradients against central differences on random cases."""
    res = SuiteResult("roi_warp")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        f, box, out_h, out_w = random_warp_case(rng)
        g = rng.normal(size=(1, f.shape[0], out_h, out_w))
        boxes = box[None].copy()

        def objective():
            return float(np.sum(warp_rois(f, boxes, out_h, out_w) * g))

        gf, gb = warp_rois_backward(f, boxes, g)
        num_b = np.array([central_difference(objective, boxes, (0, k), step) for k in range(4)])
        res.record("d/d(x,y,w,h)", rel_error(gb[0], num_b), WARP_BOX_TOL)
        flat = rng.choice(f.size, size=min(feature_entries, f.size), replace=False)
        idx = [np.unravel_index(i, f.shape) for i in flat]
        num_f = np.array([central_difference(objective, f, i, step) for i in idx])
        res.record("d/dF", rel_error(np.array([gf[i] for i in idx]), num_f), WARP_FEATURE_TOL)
        res.cases += 1
    res.seconds = time.perf_counter() - start
    return res


# ----------------------------------------------------------------------------
# masking layer and losses


def _tape_grads(build, leaves):
    with Tape() as tape:
        loss = build()
    grads = tape.gradients(loss)
    return [grads.get(t.key, np.zeros_like(t.data)) for t in leaves]


def _fd_all(objective, arrays, step):
    out = []
    for arr in arrays:
        num = np.zeros_like(arr)
        for i in np.ndindex(arr.shape):
            num[i] = central_difference(objective, arr, i, step)
        out.append(num)
    return out


def check_masking(trials=10, seed=0, step=1e-5):
    """Masked features ``pooled * resize(sigmoid(mask logits))``: gradients for both inputs."""
    res = SuiteResult("masking")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    m = cfg.mask_size
    for _ in range(trials):
        r, c = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        p3 = cfg.warp_size // cfg.stage3_pool
        pooled = Tensor(rng.normal(size=(r, c, p3, p3)), requires_grad=True)
        logits = Tensor(rng.normal(scale=2.0, size=(r, m * m)), requires_grad=True)
        g = rng.normal(size=(r, c, p3, p3))

        def build():
            return ops.sum(ops.mul(masked_features(pooled, mask_to_pooled(logits, cfg)), Tensor(g)))

        def objective():
            return build().item()

        ga, gl = _tape_grads(build, [pooled, logits])
        na, nl = _fd_all(objective, [pooled.data, logits.data], step)
        res.record("d/d(pooled features)", rel_error(ga, na), LAYER_TOL)
        res.record("d/d(mask logits)", rel_error(gl, nl), LAYER_TOL)
        res.cases += 1
    res.seconds = time.perf_counter() - start
    return res


def check_losses(trials=10, seed=0, step=1e-5):
    """Logistic, softmax, smooth-L1 and mask losses against central differences."""
    res = SuiteResult("losses")
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        n, k = int(rng.integers(2, 12)), int(rng.integers(2, 5))
        z = Tensor(rng.normal(scale=3.0, size=n), requires_grad=True)
        t = rng.integers(0, 2, size=n).astype(np.float64)
        w = rng.uniform(0.1, 1.0, size=n)
        cases = {"sigmoid cross-entropy": (lambda: ops.sigmoid_cross_entropy(z, t, w), z)}

        zk = Tensor(rng.normal(scale=2.0, size=(n, k)), requires_grad=True)
        labels = rng.integers(0, k, size=n)
        cases["softmax cross-entropy"] = (lambda: ops.softmax_cross_entropy(zk, labels, w), zk)

        # keep differences away from the |d| = 1 switch
        target = rng.normal(size=(n, 4))
        d = rng.uniform(0.05, 3.0, size=(n, 4)) * rng.choice([-1, 1], size=(n, 4))
        d = np.where(np.abs(np.abs(d) - 1) < 0.05, d * 1.2, d)
        pred = Tensor(target + d, requires_grad=True)
        wts = rng.uniform(0.1, 1.0, size=(n, 4))
        cases["smooth L1"] = (lambda: ops.smooth_l1(pred, target, wts), pred)

        m = 4
        mlog = Tensor(rng.normal(size=(n, m * m)), requires_grad=True)
        assign = Stage2Assignment(rng.random(n) < 0.6, np.zeros(n, dtype=np.int64), rng.integers(0, 2, size=(n, m, m)).astype(float))
        cases["mask loss"] = (lambda: mask_loss(mlog, assign), mlog)

        for name, (build, leaf) in cases.items():
            (ga,) = _tape_grads(build, [leaf])
            (na,) = _fd_all(lambda: build().item(), [leaf.data], step)
            res.record(name, rel_error(ga, na), LAYER_TOL)
        res.cases += 1
    res.seconds = time.perf_counter() - start
    return res


# ----------------------------------------------------------------------------
# full cascade


def tiny_scene(seed=0):
    spec = DatasetSpec(num_scenes=1, min_instances=2, max_instances=3, seed=seed)
    return generate_scene(spec, 0)


def check_end_to_end(seed=0, step=1e-5, floor=1e-6, max_entries=None, config=None, scene=None):
    """Gradient of the total cascade loss for every parameter entry.

    Routing (sampled anchors, NMS survivors, sampled RoIs, labels, chosen
    regression classes) is frozen after the first forward pass, so the
    objective is a smooth function of the parameters between kinks.  Errors
    use ``max(|a|, |n|, floor)`` as denominator; ``floor`` absorbs round-off
    on entries whose gradient is essentially zero.  ``max_entries`` caps the
    number of checked entries per parameter (all entries by default).
    """
    res = SuiteResult("end_to_end")
    start = time.perf_counter()
    cfg = config or tiny_config()
    scene = scene or tiny_scene(seed)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    with Tape() as tape:
        losses, routing = cascade_losses(params, scene, cfg, rng)
    backward(tape, losses.total, params)

    def objective():
        return cascade_losses(params, scene, cfg, routing=routing)[0].total.item()

    pick = np.random.default_rng(seed + 1)
    for name, p in params.items():
        arr = p.data
        idx = list(np.ndindex(arr.shape))
        if max_entries is not None and len(idx) > max_entries:
            idx = [idx[i] for i in np.sort(pick.choice(len(idx), max_entries, replace=False))]
        num = np.array([central_difference(objective, arr, i, step) for i in idx])
        ana = np.array([params.grads[name][i] for i in idx])
        res.record("all parameters", rel_error(ana, num, floor), END_TO_END_TOL)
        res.cases += len(idx)
    res.seconds = time.perf_counter() - start
    return res


SUITES = {
    "roi_warp": check_roi_warp,
    "masking": check_masking,
    "losses": check_losses,
    "end_to_end": check_end_to_end,
}


def run_all(seed=0, quick=False):
    """Run every suite; ``quick`` samples 64 entries per parameter in the end-to-end suite."""
    out = []
    for name, fn in SUITES.items():
        kwargs = {"seed": seed}
        if quick and name == "end_to_end":
            kwargs["max_entries"] = 64
        out.append(fn(**kwargs))
    return out
