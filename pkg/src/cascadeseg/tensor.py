"""Tensors and the recording tape used for reverse-mode differentiation.

Operations in :mod:`cascadeseg.ops` record themselves on the innermost active
:class:`Tape` whenever one of their inputs requires a gradient.  Outside a
``with Tape():`` block nothing is recorded, which is how inference runs.
"""

import itertools
import logging

import numpy as np

logger = logging.getLogger(__name__)

_keys = itertools.count()
_tape_stack = []


class DimensionError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(RuntimeError):
    """A precondition of an operation does not hold."""


class Tensor:
    """Dense float array that can take part in a recorded computation.

    Attributes:
        data: the underlying ``numpy.ndarray`` (float32 or float64).
        requires_grad: whether gradients should be propagated to this tensor.
        node_id: index of the producing node on its tape, ``None`` for leaves.
        key: process-unique integer used to index gradients.
    """

    __slots__ = ("data", "requires_grad", "node_id", "key", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self.key = next(_keys)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


class _Node:
    __slots__ = ("inputs", "output_key", "backward")

    def __init__(self, inputs, output_key, backward):
        self.inputs = inputs
        self.output_key = output_key
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended as operations execute, so every node's inputs were
    produced by earlier nodes (or are leaves) and the list is already in
    topological order.  Use as a context manager to make it the active tape::

        with Tape() as tape:
            loss = ops.sum(ops.mul(x, x))
        grads = tape.gradients(loss)
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, data, inputs, backward):
        out = Tensor(data, requires_grad=True)
        out.node_id = len(self.nodes)
        self.nodes.append(_Node(tuple(inputs), out.key, backward))
        return out

    def gradients(self, loss, seed=None):
        """Propagate from a scalar ``loss`` and return ``{leaf key: gradient}``.

        ``seed`` is the gradient of the final objective with respect to
        ``loss`` (defaults to one).
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if seed is None:
            seed = 1.0
        grads = {loss.key: np.full(loss.shape, seed, dtype=loss.dtype)}
        if loss.node_id is None:
            return grads if loss.requires_grad else {}
        if loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].output_key != loss.key:
            raise ContractError("loss was not recorded on this tape")

        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(node.output_key, None)
            if g is None:
                continue
            input_grads = node.backward(g)
            for inp, gi in zip(node.inputs, input_grads):
                if gi is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.key)
                grads[inp.key] = gi if prev is None else prev + gi
        return grads


def active_tape():
    return _tape_stack[-1] if _tape_stack else None


def backward(tape, loss, params=None, seed=None):
    """Run reverse-mode differentiation of ``loss`` along ``tape``.

    When ``params`` (a :class:`~cascadeseg.params.ParameterStore`) is given,
    its gradients are overwritten: parameters reached from the loss receive
    their accumulated gradient, unreachable ones receive zeros.  The raw
    ``{key: gradient}`` mapping is returned either way.
    """
    grads = tape.gradients(loss, seed=seed)
    if params is not None:
        for name, p in params.items():
            g = grads.get(p.key)
            params.grads[name] = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
    return grads
