"""A small reverse-mode autodiff engine over numpy arrays.

Each differentiable op produces a :class:`Tensor` carrying a :class:`Node`
(op name, inputs, backward closure) and a monotonically increasing node id.
:class:`Tape` recovers the executed ops reachable from an output in id
order, which is a valid topological order; :func:`backward` walks it in
exact reverse.

Gradients accumulate into ``.grad`` of leaf tensors created with
``requires_grad=True``.  Intermediate gradients live only for the duration
of one backward pass.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._kernels import kernels

IGNORE_INDEX = -100
LAYER_NORM_EPS = 1e-5

_node_ids = itertools.count()
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Set the global float precision (``np.float32`` or ``np.float64``)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _node: Node | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = np.require(arr, requirements="C")
        self.grad = None
        self.node = _node
        self.requires_grad = requires_grad or _node is not None
        self.id = next(_node_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __truediv__(self, other): return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    def transpose(self, *axes): return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, op: str, inputs: tuple, bwd) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    if any(t.requires_grad for t in inputs):
        return Tensor(out, _node=Node(op, inputs, bwd))
    return Tensor(out)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tape:
    """Ordered record of the ops that produced ``output``."""

    def __init__(self, output: Tensor):
        seen = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if t.node is None or t.id in seen:
                continue
            seen[t.id] = t
            stack.extend(t.node.inputs)
        self.entries = [seen[k] for k in sorted(seen)]

    def __len__(self):
        return len(self.entries)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.entries]


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError("backward() without a seed gradient needs a scalar")
        grad = np.ones_like(loss.data)
    grads = {loss.id: grad}
    tape = Tape(loss)
    leaves = {}
    for t in reversed(tape.entries):
        g = grads.pop(t.id, None)
        if g is None:
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                leaves[inp.id] = inp
            grads[inp.id] = grads[inp.id] + gi if inp.id in grads else gi
    if loss.node is None and loss.requires_grad:
        leaves[loss.id] = loss
    for lid, leaf in leaves.items():
        g = grads.get(lid)
        if g is None:
            continue
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


# --------------------------------------------------------------------------
# elementwise / structural ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")

    def bwd(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, "matmul", (a, b), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=()) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def bwd(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(a.data[idx]), "getitem", (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), "sum", (a,), bwd)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def gelu(x: Tensor) -> Tensor:
    return _make(kernels.gelu(x.data), "gelu", (x,), lambda g: (kernels.gelu_backward(x.data, np.ascontiguousarray(g)),))


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError("embedding id out of range")

    def bwd(g):
        out = np.zeros_like(weight.data)
        flat = np.ascontiguousarray(g.reshape(-1, weight.shape[1]))
        return (kernels.scatter_add_rows(out, ids.reshape(-1), flat),)

    return _make(weight.data[ids], "embedding", (weight,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return mul(x, Tensor(keep))


# --------------------------------------------------------------------------
# normalisation ops
# --------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; positions where ``mask`` is False get exactly 0.

    A row with every position masked yields all zeros.
    """
    x = as_tensor(x)
    moved = np.moveaxis(x.data, axis, -1)
    shp = moved.shape
    x2 = np.ascontiguousarray(moved.reshape(-1, shp[-1]))
    if mask is None:
        keep = np.ones_like(x2, dtype=np.bool_)
    else:
        keep = np.ascontiguousarray(np.moveaxis(np.broadcast_to(mask, x.shape), axis, -1).reshape(-1, shp[-1]))
    y2 = kernels.softmax_rows(x2, keep)
    y = np.moveaxis(y2.reshape(shp), -1, axis)

    def bwd(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, axis, -1).reshape(-1, shp[-1]))
        gx = kernels.softmax_rows_backward(y2, g2)
        return (np.moveaxis(gx.reshape(shp), -1, axis),)

    return _make(np.ascontiguousarray(y), "softmax", (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    shp = x.shape
    x2 = np.ascontiguousarray(x.data.reshape(-1, shp[-1]))
    xhat, rstd = kernels.layer_norm_rows(x2, eps)
    out = xhat * gain.data + bias.data

    def bwd(g):
        g2 = g.reshape(-1, shp[-1])
        ggain = (g2 * xhat).sum(axis=0)
        gbias = g2.sum(axis=0)
        gx = kernels.layer_norm_rows_backward(np.ascontiguousarray(g2 * gain.data), xhat, rstd)
        return gx.reshape(shp), ggain.reshape(gain.shape), gbias.reshape(bias.shape)

    return _make(out.reshape(shp), "layer_norm", (x, gain, bias), bwd)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def _zero_loss(*inputs: Tensor) -> Tensor:
    return _make(np.zeros((), dtype=_default_dtype), "empty_loss", inputs,
                 lambda g: tuple(np.zeros_like(t.data) for t in inputs))


def cross_entropy(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean NLL over non-ignored rows of ``logits[N, V]``."""
    if logits.ndim != 2:
        raise ShapeError("cross_entropy expects logits of shape [N, V]")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise ShapeError("targets length differs from logits rows")
    valid = targets != ignore_index
    if np.any((targets[valid] < 0) | (targets[valid] >= logits.shape[1])):
        raise IndexError("cross_entropy target out of range")
    count = int(valid.sum())
    if count == 0:
        return _zero_loss(logits)
    losses, probs = kernels.cross_entropy_rows(np.ascontiguousarray(logits.data), targets, ignore_index)

    def bwd(g):
        gl = probs.copy()
        rows = np.nonzero(valid)[0]
        gl[rows, targets[rows]] -= 1.0
        gl[~valid] = 0.0
        return (gl * (g / count),)

    return _make(np.asarray(losses.sum() / count), "cross_entropy", (logits,), bwd)


def binary_cross_entropy_with_logits(logits: Tensor, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean BCE over non-ignored entries; stable for large ``|logit|``."""
    x = logits.data.reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if t.shape != x.shape:
        raise ShapeError("targets shape differs from logits")
    valid = t != ignore_index
    if np.any((t[valid] != 0) & (t[valid] != 1)):
        raise ValueError("binary targets must be 0 or 1")
    count = int(valid.sum())
    if count == 0:
        return _zero_loss(logits)
    tv = np.where(valid, t, 0.0).astype(x.dtype)
    per = np.maximum(x, 0) - x * tv + np.log1p(np.exp(-np.abs(x)))
    total = np.where(valid, per, 0.0).sum() / count

    def bwd(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        gx = np.where(valid, sig - tv, 0.0) * (g / count)
        return (gx.reshape(logits.shape),)

    return _make(np.asarray(total, dtype=x.dtype), "bce_with_logits", (logits,), bwd)


def mse(pred: Tensor, target) -> Tensor:
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.data.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = max(diff.size, 1)
    return _make(np.asarray((diff * diff).sum() / n), "mse", (pred,), lambda g: (2.0 * diff * (g / n),))
