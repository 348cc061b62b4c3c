"""Named parameters, plain SGD and the binary checkpoint format."""

import struct
from collections import OrderedDict

import numpy as np

from .tensor import ContractError, Tensor

CHECKPOINT_MAGIC = b"CSEGCKPT"
CHECKPOINT_VERSION = 1

# learning rate per phase as (rate, iterations)
DEFAULT_SCHEDULE = ((0.001, 32000), (0.0001, 8000))


class ParameterStore:
    """Ordered mapping from parameter name to a gradient-requiring Tensor.

    ``grads`` holds the gradient from the most recent backward pass, keyed by
    the same names.  It is empty between optimizer steps.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.grads = {}
        self.velocity = {}

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def num_values(self):
        return int(np.sum([p.size for p in self.params.values()]))

    def zero_grad(self):
        self.grads = {}

    def state(self):
        """Copies of the parameter arrays, keyed by name."""
        return {k: v.data.copy() for k, v in self.params.items()}

    def set(self, name, value):
        p = self.params[name]
        value = np.asarray(value, dtype=self.dtype)
        if value.shape != p.shape:
            raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
        p.data = value

    def astype(self, dtype):
        out = ParameterStore(dtype)
        for k, v in self.params.items():
            out.add(k, v.data)
        return out


def sgd_step(params, lr, momentum=0.0, weight_decay=0.0):
    """In-place SGD update ``p <- p - lr * grad``, then clear the gradients.

    ``momentum`` and ``weight_decay`` default to zero.  With momentum the
    classic heavy-ball form ``v <- momentum * v + grad + wd * p`` is used.
    """
    missing = [k for k in params.params if k not in params.grads]
    if missing:
        raise ContractError(f"no gradient for parameters: {missing[:5]}")
    for name, p in params.items():
        g = params.grads[name]
        if weight_decay:
            g = g + weight_decay * p.data
        if momentum:
            v = params.velocity.get(name)
            v = g if v is None else momentum * v + g
            params.velocity[name] = v
            g = v
        p.data = (p.data - p.dtype.type(lr) * g).astype(p.dtype, copy=False)
    params.zero_grad()


def learning_rate(schedule, iteration):
    """Rate for a 0-based ``iteration`` under a ``((rate, iters), ...)`` schedule."""
    done = 0
    for rate, n in schedule:
        done += n
        if iteration < done:
            return rate
    return schedule[-1][0]


def schedule_length(schedule):
    return int(np.sum([n for _, n in schedule]))


def save_checkpoint(params, path):
    """Write every parameter as float64 little-endian data.

    Layout: magic, uint32 version, uint32 count, then per parameter uint32
    name length, utf-8 name, uint32 rank, rank x uint32 dims, raw data.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path, dtype=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"checkpoint truncated at byte {pos}")
        piece = buf[pos:pos + n]
        pos += n
        return piece

    if read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, count = struct.unpack("<II", read(8))
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    arrays = []
    for _ in range(count):
        (n,) = struct.unpack("<I", read(4))
        name = read(n).decode("utf-8")
        (rank,) = struct.unpack("<I", read(4))
        shape = struct.unpack(f"<{rank}I", read(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(read(8 * size), dtype="<f8").reshape(shape)
        arrays.append((name, data))
    if pos != len(buf):
        raise ValueError(f"trailing bytes after checkpoint at byte {pos}")
    store = ParameterStore(dtype or np.float64)
    for name, data in arrays:
        store.add(name, data)
    return store
