"""Dense array ops with hand-written backward passes.

Every forward function returns ``(out, cache)`` and has a matching
``*_backward(dout, cache)``.  Arrays are channels-last (``B, H, W, C``).

Forward contractions go through :func:`rowwise_matmul`, which evaluates
each output row with its own vector-matrix product.  A row's result then
depends only on that row's data, never on how many rows were batched
with it, which is what makes feature extraction batch-invariant and the
wavefront and sequential 2D-LSTM schedules bitwise identical.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand extents disagree; the message names the dimension."""


def rowwise_matmul(x, w):
    """``x @ w`` over the last axis, computed one row at a time.

    ``w`` may carry leading batch axes that broadcast against ``x``'s.
    """
    return (x[..., None, :] @ w)[..., 0, :]


def _check(cond, msg):
    if not cond:
        raise ShapeError(msg)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col3x3(x):
    """(B, H, W, C) -> (B, H, W, 9*C) with tap order (di, dj, c), zero padded."""
    b, h, w, c = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((b, h, w, 3, 3, c), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, di, dj, :] = xp[:, di:di + h, dj:dj + w, :]
    return cols.reshape(b, h, w, 9 * c)


def _col2im3x3(dcols, shape):
    b, h, w, c = shape
    dcols = dcols.reshape(b, h, w, 3, 3, c)
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + w, :] += dcols[:, :, :, di, dj, :]
    return dxp[:, 1:-1, 1:-1]


def conv2d_3x3(x, weights, bias):
    """Same-size 3x3 convolution with one pixel of zero padding.

    ``x`` is ``(H, W, Cin)`` or ``(B, H, W, Cin)``; ``weights`` is
    ``(3, 3, Cin, Cout)``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    _check(x.ndim == 4, f"conv2d_3x3: input rank {x.ndim}, expected 3 or 4")
    _check(weights.ndim == 4 and weights.shape[:2] == (3, 3),
           f"conv2d_3x3: kernel extent {weights.shape[:2]}, expected (3, 3)")
    b, h, w, cin = x.shape
    _check(h >= 1 and w >= 1, f"conv2d_3x3: spatial extent {(h, w)} must be >= 1")
    _check(weights.shape[2] == cin,
           f"conv2d_3x3: input channels {cin} != kernel Cin {weights.shape[2]}")
    cout = weights.shape[3]
    _check(bias.shape == (cout,), f"conv2d_3x3: bias extent {bias.shape} != Cout ({cout},)")
    cols = _im2col3x3(x)
    wm = weights.reshape(9 * cin, cout)
    out = rowwise_matmul(cols, wm) + bias
    cache = (cols, wm, x.shape, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_3x3_backward(dout, cache):
    """Returns ``(dx, dweights, dbias)``."""
    cols, wm, xshape, squeeze = cache
    if squeeze:
        dout = dout[None]
    cout = wm.shape[1]
    d2 = dout.reshape(-1, cout)
    dw = (cols.reshape(-1, wm.shape[0]).T @ d2).reshape(3, 3, xshape[3], cout)
    db = d2.sum(axis=0)
    dx = _col2im3x3(d2 @ wm.T, xshape)
    return (dx[0] if squeeze else dx), dw, db


# --------------------------------------------------------------------------
# affine
# --------------------------------------------------------------------------

def dense(x, weights, bias):
    """Affine map over the last axis: ``x @ weights + bias``."""
    _check(weights.ndim == 2, f"dense: weight rank {weights.ndim}, expected 2")
    _check(x.shape[-1] == weights.shape[0],
           f"dense: input dim {x.shape[-1]} != weight rows {weights.shape[0]}")
    _check(bias.shape == (weights.shape[1],),
           f"dense: bias extent {bias.shape} != output dim ({weights.shape[1]},)")
    out = rowwise_matmul(x, weights) + bias
    return out, (x, weights)


def dense_backward(dout, cache):
    x, weights = cache
    k = weights.shape[1]
    d2 = dout.reshape(-1, k)
    dw = x.reshape(-1, weights.shape[0]).T @ d2
    db = d2.sum(axis=0)
    dx = dout @ weights.T
    return dx, dw, db


# --------------------------------------------------------------------------
# pointwise
# --------------------------------------------------------------------------

def sigmoid(x):
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def pointwise(kind, x):
    if kind == "sigmoid":
        y = sigmoid(x)
    elif kind == "tanh":
        y = np.tanh(x)
    elif kind == "relu":
        y = np.maximum(x, 0)
    else:
        raise ValueError(f"unknown pointwise op {kind!r}")
    return y, (kind, x, y)


def pointwise_backward(dy, cache):
    kind, x, y = cache
    if kind == "sigmoid":
        return dy * y * (1 - y)
    if kind == "tanh":
        return dy * (1 - y * y)
    return dy * (x > 0)


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------

def dropout(x, rate, mode, rng=None):
    """Inverted dropout. ``mode`` is ``"train"`` or ``"infer"``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"dropout mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def avg_pool2x2(x):
    b, h, w, c = x.shape
    _check(h % 2 == 0 and w % 2 == 0, f"avg_pool2x2: spatial extent {(h, w)} must be even")
    out = x.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    return out, x.shape


def avg_pool2x2_backward(dout, shape):
    b, h, w, c = shape
    dx = np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * dout.dtype.type(0.25)
    return dx.reshape(shape)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def glorot_uniform(rng, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
