"""Minimal layer primitives with explicit backward passes.

Every forward returns ``(out, cache)``; the matching backward takes the
upstream gradient and the cache. Spatial tensors are (C, H, W); one sample
at a time and batches are loops, which keeps im2col buffers small.
"""

import numpy as np

LEAK = 0.1


def conv3x3(x, w, b=None):
    """'Same' 3x3 convolution (cross-correlation) with zero padding."""
    c, h, wd = x.shape
    co = w.shape[0]
    if w.shape[1] != c:
        raise ValueError(f"kernel expects {w.shape[1]} channels, got {c}")
    p = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    cols = np.empty((c, 9, h, wd), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, k] = p[:, dy:dy + h, dx:dx + wd]
    cols = cols.reshape(c * 9, h * wd)
    out = (w.reshape(co, c * 9) @ cols).reshape(co, h, wd)
    if b is not None:
        out += b[:, None, None]
    return out, (cols, x.shape, w)


def conv3x3_backward(dout, cache):
    cols, (c, h, wd), w = cache
    co = w.shape[0]
    dmat = dout.reshape(co, h * wd)
    dw = (dmat @ cols.T).reshape(w.shape)
    db = dmat.sum(axis=1)
    dcols = (w.reshape(co, c * 9).T @ dmat).reshape(c, 9, h, wd)
    dp = np.zeros((c, h + 2, wd + 2), dtype=dout.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        dp[:, dy:dy + h, dx:dx + wd] += dcols[:, k]
    return dp[:, 1:-1, 1:-1], dw, db


def affine(x, g, b):
    """Per-channel scale and shift."""
    return x * g[:, None, None] + b[:, None, None], (x, g)


def affine_backward(dout, cache):
    x, g = cache
    return dout * g[:, None, None], (dout * x).sum(axis=(1, 2)), dout.sum(axis=(1, 2))


def leaky_relu(x, leak=LEAK):
    return np.where(x > 0, x, leak * x), (x, leak)


def leaky_relu_backward(dout, cache):
    x, leak = cache
    return np.where(x > 0, dout, leak * dout)


def avgpool2(x):
    """2x2 average pooling; odd sizes are edge-padded first."""
    c, h, w = x.shape
    ph, pw = h % 2, w % 2
    p = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else x
    out = 0.25 * (p[:, 0::2, 0::2] + p[:, 1::2, 0::2] + p[:, 0::2, 1::2] + p[:, 1::2, 1::2])
    return out, (h, w, ph, pw)


def avgpool2_backward(dout, cache):
    h, w, ph, pw = cache
    c = dout.shape[0]
    dp = np.zeros((c, h + ph, w + pw), dtype=dout.dtype)
    q = 0.25 * dout
    for oy in (0, 1):
        for ox in (0, 1):
            dp[:, oy::2, ox::2] += q
    dx = dp[:, :h, :w].copy()
    if ph:
        dx[:, h - 1, :] += dp[:, h, :w]
    if pw:
        dx[:, :, w - 1] += dp[:, :h, w]
    if ph and pw:
        dx[:, h - 1, w - 1] += dp[:, h, w]
    return dx


def upsample2(x, shape):
    """Nearest-neighbour 2x upsampling cropped to ``shape = (H, W)``."""
    h, w = shape
    out = np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)[:, :h, :w]
    return out, x.shape


def upsample2_backward(dout, cache):
    c, h, w = cache
    dx = np.zeros((c, h, w), dtype=dout.dtype)
    for oy in (0, 1):
        for ox in (0, 1):
            part = dout[:, oy::2, ox::2]
            dx[:, :part.shape[1], :part.shape[2]] += part
    return dx


def l2_normalize(x, eps=1e-6):
    """Normalize each pixel's channel vector: x / sqrt(|x|^2 + eps)."""
    n = np.sqrt((x * x).sum(axis=0, keepdims=True) + eps)
    y = x / n
    return y, (y, n)


def l2_normalize_backward(dout, cache):
    y, n = cache
    return (dout - y * (dout * y).sum(axis=0, keepdims=True)) / n


def dense(x, w, b):
    """x: (N, D_in), w: (D_in, D_out)."""
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def dropout(x, rate, rng):
    if rate <= 0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout if keep is None else dout * keep


def bce(p, target, eps=1e-7):
    """Mean binary cross-entropy with p clamped to [eps, 1 - eps]."""
    p = np.clip(p, eps, 1.0 - eps)
    return float(-np.mean(target * np.log(p) + (1.0 - target) * np.log(1.0 - p)))


def bce_with_logits(z, target):
    """Mean BCE on logits and its gradient w.r.t. the logits."""
    loss = np.mean(np.maximum(z, 0) - z * target + np.log1p(np.exp(-np.abs(z))))
    return float(loss), (sigmoid(z) - target) / z.size
