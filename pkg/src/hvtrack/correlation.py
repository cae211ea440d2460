"""Cost volumes between feature maps, soft-argmax decoding and distribution statistics."""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch

DEFAULT_DMAX = 4
DEFAULT_TEMPERATURE = 0.1


def offsets(d_max):
    """(K, 2) array of (dx, dy) offsets, row-major over (dy, dx)."""
    r = np.arange(-d_max, d_max + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx.ravel(), dy.ravel()], axis=1)


@dataclass
class CostVolume:
    values: np.ndarray  # (K, H, W); -inf where the displaced pixel leaves the map
    d_max: int

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def shape(self):
        return self.values.shape[1:]

    @property
    def valid(self):
        return np.isfinite(self.values)


@dataclass
class DisplacementField:
    disp: np.ndarray  # (2, H, W) as (dx, dy)
    peak: np.ndarray  # (H, W) best correlation
    ratio: np.ndarray  # (H, W) best / second distinct local maximum
    entropy: np.ndarray  # (H, W) softmax entropy in nats


def build_cost_volume(f_a, f_b, d_max=DEFAULT_DMAX):
    """c[k, y, x] = f_a(x, y) . f_b(x + dx_k, y + dy_k).

    ``f_a`` is the anchor map; offsets reaching outside ``f_b`` hold -inf.
    """
    f_a = np.asarray(f_a, dtype=float)
    f_b = np.asarray(f_b, dtype=float)
    if f_a.shape != f_b.shape:
        raise ShapeMismatch(f"feature maps differ: {f_a.shape} vs {f_b.shape}")
    if d_max < 1:
        raise ValueError("d_max must be >= 1")
    _, h, w = f_a.shape
    offs = offsets(d_max)
    cv = np.full((len(offs), h, w), -np.inf)
    for k, (dx, dy) in enumerate(offs):
        ya, yb = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
        xa, xb = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
        cv[k, ya, xa] = np.einsum("fyx,fyx->yx", f_a[:, ya, xa], f_b[:, yb, xb])
    return CostVolume(cv, d_max)


def cost_volume_backward(grad, f_a, f_b, d_max):
    """Gradients of sum(grad * cv) w.r.t. both feature maps (invalid entries ignored)."""
    _, h, w = f_a.shape
    ga = np.zeros_like(f_a)
    gb = np.zeros_like(f_b)
    for k, (dx, dy) in enumerate(offsets(d_max)):
        ya, yb = slice(max(0, -dy), min(h, h - dy)), slice(max(0, dy), min(h, h + dy))
        xa, xb = slice(max(0, -dx), min(w, w - dx)), slice(max(0, dx), min(w, w + dx))
        g = grad[k, ya, xa]
        ga[:, ya, xa] += g * f_b[:, yb, xb]
        gb[:, yb, xb] += g * f_a[:, ya, xa]
    return ga, gb


def softmax(cv_values, temperature):
    """Softmax over channels; -inf entries get zero probability."""
    z = cv_values / temperature
    zmax = np.max(z, axis=0, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.exp(z - zmax)
    s = e.sum(axis=0, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def entropy(p):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * np.log(p), 0.0)
    return -t.sum(axis=0)


def peak_ratio(cv):
    """(best + 1) / (second + 1), second = best local maximum not adjacent to the best.

    Correlations are offset by one so the ratio stays positive for normalized
    features; a surface with no other local maximum falls back to the best
    non-adjacent value.
    """
    d = cv.d_max
    n = 2 * d + 1
    _, h, w = cv.values.shape
    grid = cv.values.reshape(n, n, h, w)
    pad = np.pad(grid, ((1, 1), (1, 1), (0, 0), (0, 0)), constant_values=-np.inf)
    is_max = np.isfinite(grid)
    for oy in (-1, 0, 1):
        for ox in (-1, 0, 1):
            if oy or ox:
                is_max &= grid >= pad[1 + oy:1 + oy + n, 1 + ox:1 + ox + n]
    flat = cv.values
    best_k = np.argmax(np.where(np.isfinite(flat), flat, -np.inf), axis=0)
    best = np.take_along_axis(flat, best_k[None], axis=0)[0]
    by, bx = np.divmod(best_k, n)
    ky, kx = np.divmod(np.arange(n * n), n)
    near = (np.abs(ky[:, None, None] - by[None]) <= 1) & (np.abs(kx[:, None, None] - bx[None]) <= 1)
    far = np.isfinite(flat) & ~near
    cand = np.where(far & is_max.reshape(n * n, h, w), flat, -np.inf)
    second = cand.max(axis=0)
    fallback = np.where(far, flat, -np.inf).max(axis=0)
    second = np.where(np.isfinite(second), second, fallback)
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = (best + 1.0) / (second + 1.0)
    ratio = np.where(np.isfinite(second) & (second + 1.0 > 1e-12), ratio, np.inf)
    ratio = np.where(np.isfinite(best), ratio, 1.0)
    return best, ratio


def soft_argmax_decode(cv, temperature=DEFAULT_TEMPERATURE):
    """Expected displacement under softmax(c / T), plus peak score, peak ratio and entropy."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    p = softmax(cv.values, temperature)
    offs = offsets(cv.d_max).astype(float)
    disp = np.einsum("kyx,kc->cyx", p, offs)
    best, ratio = peak_ratio(cv)
    best = np.where(np.isfinite(best), best, 0.0)
    return DisplacementField(disp, best, ratio, entropy(p))


def cost_volume_statistics(cvs, temperature=DEFAULT_TEMPERATURE, entropy_fraction=0.5):
    """Five numbers per level, concatenated in level order.

    Per level: mean peak score, max peak score, mean softmax entropy, mean
    (capped) peak ratio, and the fraction of pixels whose entropy exceeds
    ``entropy_fraction * ln(K)``.
    """
    out = []
    for cv in cvs:
        field = soft_argmax_decode(cv, temperature)
        k = cv.channels
        ratio = np.minimum(field.ratio, 10.0)
        out += [
            float(field.peak.mean()),
            float(field.peak.max()),
            float(field.entropy.mean()),
            float(ratio.mean()),
            float(np.mean(field.entropy > entropy_fraction * np.log(k))),
        ]
    return np.array(out)
