"""Row-wise numeric kernels used by the autodiff engine.

Every kernel exists twice: a pure-numpy version and a numba ``@njit``
version with identical semantics.  The numba path is used when numba
imports cleanly and ``CMLFORMER_DISABLE_NUMBA`` is unset (or ``0``).
All kernels operate on C-contiguous 2-D arrays; callers reshape.
"""
from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _np_softmax_rows(x, keep):
    z = np.where(keep, x, -np.inf)
    m = z.max(axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(keep, np.exp(z - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    s = np.where(s > 0, s, 1.0)
    return e / s


def _np_softmax_rows_backward(y, gy):
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def _np_layer_norm_rows(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def _np_layer_norm_rows_backward(gxhat, xhat, rstd):
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (gxhat - m1 - xhat * m2)


def _np_cross_entropy_rows(logits, targets, ignore_index):
    """Per-row NLL and softmax probabilities; ignored rows get loss 0."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    lse = (m + np.log(s))[:, 0]
    valid = targets != ignore_index
    safe = np.where(valid, targets, 0)
    picked = logits[np.arange(logits.shape[0]), safe]
    losses = np.where(valid, lse - picked, 0.0)
    return losses, probs


def _np_gelu(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def _np_gelu_backward(x, gy):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def _np_scatter_add_rows(out, ids, g):
    np.add.at(out, ids, g)
    return out


numpy_kernels = SimpleNamespace(
    softmax_rows=_np_softmax_rows,
    softmax_rows_backward=_np_softmax_rows_backward,
    layer_norm_rows=_np_layer_norm_rows,
    layer_norm_rows_backward=_np_layer_norm_rows_backward,
    cross_entropy_rows=_np_cross_entropy_rows,
    gelu=_np_gelu,
    gelu_backward=_np_gelu_backward,
    scatter_add_rows=_np_scatter_add_rows,
)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

def _build_numba_kernels():
    from numba import njit

    @njit(cache=True)
    def softmax_rows(x, keep):
        n, k = x.shape
        y = np.zeros_like(x)
        for i in range(n):
            m = -np.inf
            for j in range(k):
                if keep[i, j] and x[i, j] > m:
                    m = x[i, j]
            if m == -np.inf:
                continue
            s = 0.0
            for j in range(k):
                if keep[i, j]:
                    v = math.exp(x[i, j] - m)
                    y[i, j] = v
                    s += v
            for j in range(k):
                y[i, j] /= s
        return y

    @njit(cache=True)
    def softmax_rows_backward(y, gy):
        n, k = y.shape
        gx = np.empty_like(y)
        for i in range(n):
            dot = 0.0
            for j in range(k):
                dot += gy[i, j] * y[i, j]
            for j in range(k):
                gx[i, j] = y[i, j] * (gy[i, j] - dot)
        return gx

    @njit(cache=True)
    def layer_norm_rows(x, eps):
        n, k = x.shape
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(k):
                mu += x[i, j]
            mu /= k
            var = 0.0
            for j in range(k):
                d = x[i, j] - mu
                var += d * d
            var /= k
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(k):
                xhat[i, j] = (x[i, j] - mu) * r
        return xhat, rstd

    @njit(cache=True)
    def layer_norm_rows_backward(gxhat, xhat, rstd):
        n, k = xhat.shape
        gx = np.empty_like(xhat)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(k):
                m1 += gxhat[i, j]
                m2 += gxhat[i, j] * xhat[i, j]
            m1 /= k
            m2 /= k
            for j in range(k):
                gx[i, j] = rstd[i] * (gxhat[i, j] - m1 - xhat[i, j] * m2)
        return gx

    @njit(cache=True)
    def cross_entropy_rows(logits, targets, ignore_index):
        n, k = logits.shape
        probs = np.empty_like(logits)
        losses = np.zeros(n, dtype=logits.dtype)
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, k):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(k):
                v = math.exp(logits[i, j] - m)
                probs[i, j] = v
                s += v
            for j in range(k):
                probs[i, j] /= s
            t = targets[i]
            if t != ignore_index:
                losses[i] = m + math.log(s) - logits[i, t]
        return losses, probs

    @njit(cache=True)
    def gelu(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for i in range(flat.size):
            v = flat[i]
            out[i] = 0.5 * v * (1.0 + math.tanh(_GELU_C * (v + 0.044715 * v * v * v)))
        return out.reshape(x.shape)

    @njit(cache=True)
    def gelu_backward(x, gy):
        fx = x.ravel()
        fg = gy.ravel()
        out = np.empty_like(fx)
        for i in range(fx.size):
            v = fx[i]
            t = math.tanh(_GELU_C * (v + 0.044715 * v * v * v))
            dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
            out[i] = fg[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
        return out.reshape(x.shape)

    @njit(cache=True)
    def scatter_add_rows(out, ids, g):
        for i in range(ids.shape[0]):
            r = ids[i]
            for j in range(g.shape[1]):
                out[r, j] += g[i, j]
        return out

    return SimpleNamespace(
        softmax_rows=softmax_rows,
        softmax_rows_backward=softmax_rows_backward,
        layer_norm_rows=layer_norm_rows,
        layer_norm_rows_backward=layer_norm_rows_backward,
        cross_entropy_rows=cross_entropy_rows,
        gelu=gelu,
        gelu_backward=gelu_backward,
        scatter_add_rows=scatter_add_rows,
    )


def _numba_requested() -> bool:
    return os.environ.get("CMLFORMER_DISABLE_NUMBA", "0").strip().lower() in ("", "0", "false", "no")


numba_kernels = None
if _numba_requested():
    try:
        numba_kernels = _build_numba_kernels()
    except ImportError:  # pragma: no cover - numba is a declared dependency
        numba_kernels = None

BACKEND = "numba" if numba_kernels is not None else "numpy"
kernels = numba_kernels if numba_kernels is not None else numpy_kernels
