"""Tensor value type and the gradient tape.

Tensors wrap a numpy array. Operations never modify the arrays they are
given; an operation whose inputs require gradients appends a record to the
innermost active :class:`GradTape`, and :func:`backward` replays those
records in reverse.
"""
from __future__ import annotations

import threading

import numpy as np

from .errors import DimensionError

_AXES = ("batch", "channels", "height", "width")
_local = threading.local()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def check_rank4(t, what="input"):
    if t.data.ndim != 4:
        raise DimensionError(f"{what} must be rank 4 (n, c, h, w), got shape {t.shape}", axis="rank")
    for axis, extent in zip(_AXES, t.shape):
        if extent < 1:
            raise DimensionError(f"{what} has empty {axis} axis", axis=axis)


class GradTape:
    """Ordered record of primitive applications.

    Used as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


def record(out, inputs, backward_fn, op=""):
    """Register ``out = op(*inputs)`` on the active tape.

    ``backward_fn`` maps the output gradient to a tuple with one entry per
    input (``None`` where no gradient flows).
    """
    tape = active_tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    tape.records.append((op, out, tuple(inputs), backward_fn))
    return out


def backward(tape, loss, params=()):
    """Reverse-mode sweep from the scalar ``loss``.

    Sets ``.grad`` on every tensor that requires gradients and was reached.
    Tensors in ``params`` that the sweep never reaches get a zero gradient.
    Returns ``{id(tensor): grad}`` for the reached leaves.
    """
    if loss.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}", axis="rank")
    grads = {id(loss): np.ones_like(loss.data)}
    keep = {id(loss): loss}
    produced = set()
    for _, out, inputs, fn in reversed(tape.records):
        produced.add(id(out))
        g = grads.get(id(out))
        if g is None:
            continue
        out.grad = g
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = t
    leaves = {}
    for key, t in keep.items():
        if key not in produced:
            t.grad = grads[key]
            leaves[key] = grads[key]
    for p in params:
        if id(p) not in leaves:
            p.grad = np.zeros_like(p.data)
    return leaves
