"""Forward and backward passes for the layer types of the classifier.

Activations are NHWC. Every function is dtype-agnostic so the same code
runs in float32 for training and float64 for finite-difference checks.
Forward functions return ``(out, cache)``; backward functions take the
upstream gradient and that cache.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv3x3_forward(x, w, b):
    """Same-padded 3x3 convolution, stride 1. ``w`` has shape (3, 3, Cin, Cout)."""
    n, h, wd, c = x.shape
    if w.shape[:3] != (3, 3, c):
        raise ValueError(f"conv weight {w.shape} does not match input channels {c}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (n, h, w, c, 3, 3)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * wd, 9 * c)
    out = cols @ w.reshape(9 * c, -1) + b
    return out.reshape(n, h, wd, -1), (x.shape, cols, w)


def conv3x3_backward(dout, cache, need_dx=True):
    shape, cols, w = cache
    n, h, wd, c = shape
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(9 * c, -1).T).reshape(n, h, wd, 3, 3, c)
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, ky : ky + h, kx : kx + wd, :] += dcols[:, :, :, ky, kx, :]
    return dxp[:, 1:-1, 1:-1, :], dw, db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool2_forward(x):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    xr = x[:, : 2 * h2, : 2 * w2, :].reshape(n, h2, 2, w2, 2, c)
    xr = xr.transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    shape, idx = cache
    n, h, w, c = shape
    h2, w2 = h // 2, w // 2
    g = np.zeros((n, h2, w2, c, 4), dtype=dout.dtype)
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    g = g.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, : 2 * h2, : 2 * w2, :] = g
    return dx


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def dropout_mask(shape, p, seed, dtype=np.float32):
    """Inverted-dropout mask: kept units are scaled by ``1 / (1 - p)``."""
    if p == 0:
        return np.ones(shape, dtype=dtype)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / np.asarray(1 - p, dtype=dtype)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, labels):
    """Mean of ``-log p[label]`` with probabilities clamped at 1e-12."""
    labels = np.asarray(labels)
    if labels.size and not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    p = probs[np.arange(len(labels)), labels.astype(np.int64)]
    return float(np.mean(-np.log(np.maximum(p, 1e-12))))


def softmax_cross_entropy_backward(probs, labels):
    """Gradient of the mean cross-entropy w.r.t. the logits: ``(p - onehot) / N``."""
    g = probs.copy()
    g[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] -= 1
    return g / len(labels)
