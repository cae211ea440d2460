"""Increment estimation (analytic and learned heads), refinement, losses, GT visibility.

All increments follow one convention: the homography H_s maps TRACKED
template coordinates to REFERENCE template coordinates (identity when the
two templates are aligned), and its four-point form is
``H_s(corner_k) - corner_k``. Cost volumes are anchored on the tracked
template, so decoded displacements point from tracked to reference pixels.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import nn
from .correlation import build_cost_volume, offsets, softmax
from .errors import DegenerateQuad, InsufficientSupport, ShapeMismatch, WeightTopologyMismatch
from .imaging import bilinear_sample, pixel_grid

TUKEY_C = 4.685
MAD_SCALE = 1.4826
CLAMP_EPS = 1e-7


@dataclass
class LossWeights:
    lambda_d: float = 1.0
    lambda_m: float = 1.0
    lambda_v: float = 1.0


@dataclass
class AnalyticConfig:
    irls_iterations: int = 5
    residual_gate: float = 3.0
    ratio_gate: float = 0.0
    min_support: int = 12
    support_weight: float = 0.1
    min_scale: float = 0.1
    grid_cells: int = 4


@dataclass
class RefineConfig:
    gn_iterations: int = 5
    vis_cos: float = 0.5
    damping: float = 1e-6
    tol: float = 1e-3  # stop once a step moves the template by less than this (pixels)


@dataclass
class IncrementEstimate:
    disp: np.ndarray  # (4, 2) four-point form of H_s at the estimate's level
    vis: np.ndarray  # (H, W) visibility probability
    inlier_rms: float
    h: np.ndarray = None  # H_s in level pixel coordinates
    weights: np.ndarray = None  # final per-pixel fit weights
    extras: dict = field(default_factory=dict)

    @property
    def binary_vis(self):
        return (self.vis >= 0.5).astype(float)


# ---------------------------------------------------------------- polygons / GT

def points_in_polygon(xs, ys, polygon):
    """Even-odd crossing test, vectorised over points."""
    poly = np.asarray(polygon, dtype=float)
    inside = np.zeros(np.shape(xs), dtype=bool)
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        if y0 == y1:
            continue
        crosses = (ys >= min(y0, y1)) & (ys < max(y0, y1))
        xint = x0 + (ys - y0) * (x1 - x0) / (y1 - y0)
        inside ^= crosses & (xs < xint)
    return inside


def points_in_convex_quad(xs, ys, quad, tol=1e-9):
    """Inclusive half-plane test for a clockwise (image coordinates) convex quad."""
    q = np.asarray(quad, dtype=float)
    inside = np.ones(np.shape(xs), dtype=bool)
    for i in range(4):
        x0, y0 = q[i]
        x1, y1 = q[(i + 1) % 4]
        cross = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
        inside &= cross >= -tol * max(1.0, np.hypot(x1 - x0, y1 - y0))
    return inside


def gt_visibility(quad_gt, frame_size, occluders, sampling_h, level, template_size=120):
    """Ground-truth visibility of a tracked template sampled with ``sampling_h``.

    A level pixel is visible when it back-projects inside the frame, inside
    the object's true quad, and outside every occluder polygon.
    """
    fw, fh = frame_size
    s = geo.level_scaling((template_size, template_size), (level, level))
    to_frame = geo.invert(s @ np.asarray(sampling_h, dtype=float))
    xs, ys = pixel_grid(level, level)
    pts = geo.apply(to_frame, np.stack([xs.ravel(), ys.ravel()], axis=1), check=False)
    px = pts[:, 0].reshape(level, level)
    py = pts[:, 1].reshape(level, level)
    vis = (px >= 0) & (px <= fw - 1) & (py >= 0) & (py <= fh - 1)
    vis &= points_in_convex_quad(px, py, quad_gt)
    for poly in occluders or ():
        vis &= ~points_in_polygon(px, py, poly)
    return vis.astype(float)


# ---------------------------------------------------------------- losses

def loss_homography(d_pred, d_gt):
    """Mean over the four corners of the L1 corner-displacement error."""
    diff = np.asarray(d_gt, dtype=float).reshape(4, 2) - np.asarray(d_pred, dtype=float).reshape(4, 2)
    return float(np.abs(diff).sum() / 4.0)


def loss_homography_grad(d_pred, d_gt):
    return np.sign(np.asarray(d_pred, dtype=float) - np.asarray(d_gt, dtype=float)).reshape(4, 2) / 4.0


def loss_visibility(m_pred, m_gt, eps=CLAMP_EPS):
    m_pred = np.asarray(m_pred, dtype=float)
    m_gt = np.asarray(m_gt, dtype=float)
    if m_pred.shape != m_gt.shape:
        raise ShapeMismatch(f"visibility maps differ: {m_pred.shape} vs {m_gt.shape}")
    return nn.bce(m_pred, m_gt, eps)


def loss_visibility_grad(m_pred, m_gt, eps=CLAMP_EPS):
    p = np.asarray(m_pred, dtype=float)
    inside = (p > eps) & (p < 1 - eps)
    pc = np.clip(p, eps, 1 - eps)
    g = (pc - m_gt) / (pc * (1 - pc)) / p.size
    return np.where(inside, g, 0.0)


def warp_features(f, h, mask_out=True):
    """Sample every channel of ``f`` at h(x) for each pixel x of the same grid."""
    c, hh, ww = f.shape
    xs, ys = pixel_grid(ww, hh)
    pts = geo.apply(h, np.stack([xs.ravel(), ys.ravel()], axis=1), check=False)
    qx = pts[:, 0].reshape(hh, ww)
    qy = pts[:, 1].reshape(hh, ww)
    out, valid = bilinear_sample(np.moveaxis(f, 0, -1), qx, qy)
    return np.moveaxis(out, -1, 0), valid, (qx, qy)


def _bilinear_scatter(grad, qx, qy, valid, shape):
    """Adjoint of bilinear sampling: spread (C, H, W) grads back onto a (C, h, w) map."""
    c = grad.shape[0]
    h, w = shape
    out = np.zeros((c, h, w))
    xc = np.where(valid, qx, 0.0)
    yc = np.where(valid, qy, 0.0)
    x0 = np.minimum(np.floor(xc).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xc - x0
    ay = yc - y0
    g = np.where(valid[None], grad, 0.0)
    flat = out.reshape(c, -1)
    for yy, xx, wgt in ((y0, x0, (1 - ax) * (1 - ay)), (y0, x1, ax * (1 - ay)),
                        (y1, x0, (1 - ax) * ay), (y1, x1, ax * ay)):
        idx = (yy * w + xx).ravel()
        for ch in range(c):
            flat[ch] += np.bincount(idx, weights=(g[ch] * wgt).ravel(), minlength=h * w)
    return out


def loss_alignment(f_r, f_t, h_tr, m_gt):
    """Visible feature distance between f_t and f_r warped by ``h_tr`` (tracked -> reference)."""
    f_r = np.asarray(f_r, dtype=float)
    f_t = np.asarray(f_t, dtype=float)
    if f_r.shape != f_t.shape or f_t.shape[1:] != np.shape(m_gt):
        raise ShapeMismatch("feature maps and mask must share a shape")
    geo.invert(h_tr)
    warped, _, _ = warp_features(f_r, h_tr)
    n = m_gt.size
    return float((m_gt[None] * np.abs(warped - f_t)).sum() / n)


def loss_alignment_grad(f_r, f_t, h_tr, m_gt):
    warped, valid, (qx, qy) = warp_features(f_r, h_tr)
    n = m_gt.size
    s = m_gt[None] * np.sign(warped - f_t) / n
    g_t = -s
    g_r = _bilinear_scatter(s, qx, qy, valid, f_r.shape[1:])
    return g_r, g_t


def loss_total(l_d, l_m, l_v, weights=None):
    w = weights or LossWeights()
    return w.lambda_d * l_d + w.lambda_m * l_m + w.lambda_v * l_v


# ---------------------------------------------------------------- analytic head

def tukey_weights(r, c):
    u = r / c
    return np.where(np.abs(u) < 1.0, (1.0 - u * u) ** 2, 0.0)


def _hartley(pts, w):
    sel = pts[w > 0] if np.any(w > 0) else pts
    c = sel.mean(axis=0)
    d = np.sqrt(((sel - c) ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(d, 1e-12)
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def weighted_dlt(src, dst, w):
    """Weighted least-squares homography src -> dst (normalized DLT, SVD)."""
    ts, td = _hartley(src, w), _hartley(dst, w)
    s = geo.apply(ts, src, check=False)
    d = geo.apply(td, dst, check=False)
    sw = np.sqrt(np.maximum(w, 0.0))
    keep = sw > 0
    s, d, sw = s[keep], d[keep], sw[keep]
    if len(s) < 4:
        raise InsufficientSupport("fewer than four weighted correspondences")
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    a = np.concatenate([
        np.stack([x, y, o, z, z, z, -u * x, -u * y, -u], axis=1) * sw[:, None],
        np.stack([z, z, z, x, y, o, -v * x, -v * y, -v], axis=1) * sw[:, None],
    ])
    # smallest eigenvector of the 9x9 normal matrix (same null vector as the SVD, far cheaper)
    _, vec = np.linalg.eigh(a.T @ a)
    hn = vec[:, 0].reshape(3, 3)
    h = np.linalg.solve(td, hn @ ts)
    if abs(h[2, 2]) < 1e-12:
        raise DegenerateQuad("weighted fit is degenerate")
    return geo.canonical(h)


def transfer_residuals(h, src, dst):
    """Per-correspondence transfer error; points mapped to infinity get +inf."""
    x = h[0, 0] * src[:, 0] + h[0, 1] * src[:, 1] + h[0, 2]
    y = h[1, 0] * src[:, 0] + h[1, 1] * src[:, 1] + h[1, 2]
    z = h[2, 0] * src[:, 0] + h[2, 1] * src[:, 1] + h[2, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    r = np.hypot(x / zs - dst[:, 0], y / zs - dst[:, 1])
    return np.where(ok, r, np.inf)


def _weighted_median(vals, w):
    order = np.argsort(vals)
    cw = np.cumsum(w[order])
    return vals[order][np.searchsorted(cw, 0.5 * cw[-1])]


LMEDS_SAMPLES = 300
LMEDS_KEEP = 32


def _lmeds_init(src, dst, w0, size, cfg):
    """Least-median-of-squares choice among four-point hypotheses built from cell medians."""
    g = cfg.grid_cells
    width, height = size
    cx = np.minimum((src[:, 0] * g / width).astype(int), g - 1)
    cy = np.minimum((src[:, 1] * g / height).astype(int), g - 1)
    support = w0 > cfg.support_weight
    cells = {}
    for j in range(g):
        for i in range(g):
            sel = support & (cx == i) & (cy == j)
            if sel.sum() < 3:
                continue
            ww = w0[sel]
            p = (src[sel] * ww[:, None]).sum(axis=0) / ww.sum()
            disp = dst[sel] - src[sel]
            m = np.array([_weighted_median(disp[:, 0], ww), _weighted_median(disp[:, 1], ww)])
            cells[(i, j)] = (p, p + m)
    hyps = []
    try:
        hyps.append(weighted_dlt(src, dst, w0))
    except (InsufficientSupport, DegenerateQuad, np.linalg.LinAlgError):
        pass
    if len(cells) >= 4:
        # every four-cell subset, so a hypothesis free of a one-sided occluder always exists
        pd = np.array(list(cells.values()))  # (C, 2 src/dst, 2)
        combos = pd[np.array(list(itertools.combinations(range(len(pd)), 4)))]
        hyps.extend(_batch_four_point(combos[:, :, 0], combos[:, :, 1], size))
    if not hyps:
        raise InsufficientSupport("no usable motion hypothesis")
    idx = np.flatnonzero(support)
    if idx.size > LMEDS_SAMPLES:
        idx = idx[np.linspace(0, idx.size - 1, LMEDS_SAMPLES).astype(int)]
    ss, ds, ws = src[idx], dst[idx], w0[idx]
    hs = np.stack(hyps)
    # screen every hypothesis on a quarter of the points, then rank the best few on all of them
    if len(hs) > LMEDS_KEEP:
        coarse = _lmeds_scores(hs, ss[::4], ds[::4], ws[::4])
        hs = hs[np.argsort(coarse)[:LMEDS_KEEP]]
    return geo.canonical(hs[int(np.argmin(_lmeds_scores(hs, ss, ds, ws)))])


def _lmeds_scores(hs, ss, ds, ws):
    """Weighted median transfer residual of each hypothesis."""
    pts = np.concatenate([ss, np.ones((len(ss), 1))], axis=1)
    q = hs @ pts.T  # (N, 3, P)
    z = q[:, 2]
    ok = z > 1e-9
    zs = np.where(ok, z, 1.0)
    r = np.hypot(q[:, 0] / zs - ds[:, 0], q[:, 1] / zs - ds[:, 1])
    r = np.where(ok, r, 1e9)
    order = np.argsort(r, axis=1)
    cw = np.cumsum(ws[order], axis=1)
    k = (cw < 0.5 * cw[:, -1:]).sum(axis=1)
    return np.take_along_axis(r, order, axis=1)[np.arange(len(hs)), k]


def _batch_four_point(src, dst, size):
    """Exact homographies for stacks of four correspondences; degenerate sets are dropped."""
    s = np.asarray(size, dtype=float)
    sc = 2.0 / s.max()
    a = (src - s / 2) * sc
    b = (dst - s / 2) * sc
    n = len(a)
    m = np.zeros((n, 8, 8))
    rhs = np.zeros((n, 8))
    x, y, u, v = a[..., 0], a[..., 1], b[..., 0], b[..., 1]
    m[:, 0::2, 0], m[:, 0::2, 1], m[:, 0::2, 2] = x, y, 1.0
    m[:, 0::2, 6], m[:, 0::2, 7] = -u * x, -u * y
    m[:, 1::2, 3], m[:, 1::2, 4], m[:, 1::2, 5] = x, y, 1.0
    m[:, 1::2, 6], m[:, 1::2, 7] = -v * x, -v * y
    rhs[:, 0::2], rhs[:, 1::2] = u, v
    det = np.abs(np.linalg.det(m))
    keep = det > 1e-10
    if not keep.any():
        return []
    sol = np.linalg.solve(m[keep], rhs[keep][..., None])[..., 0]
    hn = np.concatenate([sol, np.ones((len(sol), 1))], axis=1).reshape(-1, 3, 3)
    t = np.array([[sc, 0, -sc * s[0] / 2], [0, sc, -sc * s[1] / 2], [0, 0, 1.0]])
    return list(np.linalg.inv(t) @ hn @ t)


def estimate_increment_analytic(disp_field, vis_prior, cfg=None):
    """Robust homography fit to a decoded displacement field."""
    cfg = cfg or AnalyticConfig()
    _, h, w = disp_field.disp.shape
    prior = np.asarray(vis_prior, dtype=float)
    w0 = (np.clip(disp_field.peak, 0.0, 1.0) * prior).ravel()
    if np.count_nonzero(w0 > cfg.support_weight) < cfg.min_support:
        raise InsufficientSupport(f"fewer than {cfg.min_support} supported pixels")
    xs, ys = pixel_grid(w, h)
    src = np.stack([xs.ravel(), ys.ravel()], axis=1)
    dst = src + np.stack([disp_field.disp[0].ravel(), disp_field.disp[1].ravel()], axis=1)
    hs = _lmeds_init(src, dst, w0, (w, h), cfg)
    wts = w0
    for _ in range(cfg.irls_iterations):
        r = transfer_residuals(hs, src, dst)
        sup = (w0 > cfg.support_weight) & np.isfinite(r)
        sigma = max(MAD_SCALE * float(np.median(r[sup])), cfg.min_scale)
        wts = w0 * tukey_weights(np.where(np.isfinite(r), r, 1e9), TUKEY_C * sigma)
        try:
            hs = weighted_dlt(src, dst, wts)
        except (InsufficientSupport, DegenerateQuad):
            break
    r = transfer_residuals(hs, src, dst)
    sigma = max(MAD_SCALE * float(np.median(r[(w0 > cfg.support_weight) & np.isfinite(r)])), cfg.min_scale)
    wts = w0 * tukey_weights(np.where(np.isfinite(r), r, 1e9), TUKEY_C * sigma)
    vis = (r < cfg.residual_gate) & (disp_field.ratio.ravel() > cfg.ratio_gate) & (prior.ravel() >= 0.5)
    good = wts > 0
    rms = float(np.sqrt((wts[good] * r[good] ** 2).sum() / wts[good].sum())) if good.any() else float("inf")
    disp4 = geo.homography_to_four_point(hs, (w, h))
    if not geo.is_valid_quad(geo.template_corners((w, h)) + disp4, min_area=1.0):
        raise DegenerateQuad("estimated increment folds the template")
    return IncrementEstimate(disp4, vis.reshape(h, w).astype(float), rms, hs, wts.reshape(h, w))


# ---------------------------------------------------------------- learned head

HEAD_DESCRIPTOR = 10  # top-8 correlations, zero-offset correlation, mean correlation
HEAD_HIDDEN = 16
HEAD_TOPK = 8


def head_shapes(hidden=HEAD_HIDDEN):
    return {
        "vis.w1": (HEAD_DESCRIPTOR, hidden), "vis.b1": (hidden,),
        "vis.w2": (hidden, 1), "vis.b2": (1,),
        "out.w": (8, 8), "out.b": (8,),
    }


def init_learned_head(seed=0, zero=False, hidden=HEAD_HIDDEN):
    """Identity output layer and small random visibility MLP (or all zeros)."""
    rng = np.random.default_rng(seed)
    shapes = head_shapes(hidden)
    p = {k: np.zeros(s) for k, s in shapes.items()}
    if not zero:
        p["vis.w1"] = rng.normal(0, np.sqrt(2.0 / HEAD_DESCRIPTOR), size=shapes["vis.w1"])
        p["vis.w2"] = rng.normal(0, np.sqrt(1.0 / hidden), size=shapes["vis.w2"])
        p["out.w"] = np.eye(8)
    return p


def validate_head(params):
    hidden = params.get("vis.b1", np.zeros(0)).shape[0]
    for name, shape in head_shapes(hidden).items():
        if name not in params or tuple(params[name].shape) != shape:
            got = None if name not in params else tuple(params[name].shape)
            raise WeightTopologyMismatch(f"head tensor {name}: {got} != {shape}")
    return params


@dataclass
class HeadConfig:
    temperature: float = 0.1
    ridge: float = 1e-4


def _normalized_grid(w, h):
    s = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    xs, ys = pixel_grid(w, h)
    return (xs.ravel() - s[0]) / s[0], (ys.ravel() - s[1]) / s[1], s


UNIT_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
BETA_IDENTITY = np.array([1.0, 0, 0, 0, 1.0, 0, 0, 0])


def learned_head_forward(cv, prior, params, cfg=None):
    """Visibility MLP + weighted linear homography fit + linear update layer.

    Returns (disp (4, 2), vis (H, W), cache).
    """
    cfg = cfg or HeadConfig()
    validate_head(params)
    k, h, w = cv.values.shape
    n = h * w
    vals = cv.values.reshape(k, n)
    valid = np.isfinite(vals)
    cvd = np.where(valid, vals, -1.0)
    order = np.argsort(-cvd, axis=0)[:HEAD_TOPK]
    top = np.take_along_axis(cvd, order, axis=0)
    nvalid = valid.sum(axis=0)
    mean = cvd.sum(axis=0, where=valid) / np.maximum(nvalid, 1)
    phi = np.concatenate([top, cvd[k // 2][None], mean[None]]).T  # (n, D)
    pre1, c1 = nn.dense(phi, params["vis.w1"], params["vis.b1"])
    h1, ca = nn.leaky_relu(pre1)
    z, c2 = nn.dense(h1, params["vis.w2"], params["vis.b2"])
    v = nn.sigmoid(z[:, 0])
    pri = np.asarray(prior, dtype=float).ravel()
    m = v * pri

    p = softmax(cv.values, cfg.temperature).reshape(k, n)
    offs = offsets(cv.d_max).astype(float)
    u = offs.T @ p  # (2, n)
    xh, yh, s = _normalized_grid(w, h)
    xp = xh + u[0] / s[0]
    yp = yh + u[1] / s[1]
    zz, oo = np.zeros(n), np.ones(n)
    a1 = np.stack([xh, yh, oo, zz, zz, zz, -xh * xp, -yh * xp], axis=1)
    a2 = np.stack([zz, zz, zz, xh, yh, oo, -xh * yp, -yh * yp], axis=1)
    lam = cfg.ridge * n
    mat = (a1 * m[:, None]).T @ a1 + (a2 * m[:, None]).T @ a2 + lam * np.eye(8)
    rhs = (a1 * m[:, None]).T @ xp + (a2 * m[:, None]).T @ yp + lam * BETA_IDENTITY
    beta = np.linalg.solve(mat, rhs)
    cx, cy = UNIT_CORNERS[:, 0], UNIT_CORNERS[:, 1]
    num_x = beta[0] * cx + beta[1] * cy + beta[2]
    num_y = beta[3] * cx + beta[4] * cy + beta[5]
    den = beta[6] * cx + beta[7] * cy + 1.0
    dfit = np.stack([num_x / den - cx, num_y / den - cy], axis=1).ravel()
    dout = params["out.w"] @ dfit + params["out.b"]
    disp = dout.reshape(4, 2) * s[None, :]
    cache = dict(cv=cv, order=order, valid=valid, nvalid=nvalid, c1=c1, ca=ca, c2=c2, v=v, pri=pri,
                 m=m, p=p, offs=offs, u=u, xh=xh, yh=yh, s=s, xp=xp, yp=yp, a1=a1, a2=a2,
                 mat=mat, beta=beta, num_x=num_x, num_y=num_y, den=den, dfit=dfit,
                 temperature=cfg.temperature, shape=(h, w))
    return disp, m.reshape(h, w), cache


def learned_head_backward(grad_disp, grad_vis, params, cache):
    """Gradients w.r.t. head parameters and the cost-volume values."""
    h, w = cache["shape"]
    n = h * w
    s = cache["s"]
    grads = {}
    gd = np.zeros(8) if grad_disp is None else (np.asarray(grad_disp).reshape(4, 2) * s[None, :]).ravel()
    grads["out.w"] = np.outer(gd, cache["dfit"])
    grads["out.b"] = gd
    gfit = (params["out.w"].T @ gd).reshape(4, 2)
    cx, cy = UNIT_CORNERS[:, 0], UNIT_CORNERS[:, 1]
    den = cache["den"]
    qx, qy = cache["num_x"] / den, cache["num_y"] / den
    gx, gy = gfit[:, 0] / den, gfit[:, 1] / den
    gbeta = np.array([
        (gx * cx).sum(), (gx * cy).sum(), gx.sum(),
        (gy * cx).sum(), (gy * cy).sum(), gy.sum(),
        -((gx * qx + gy * qy) * cx).sum(), -((gx * qx + gy * qy) * cy).sum(),
    ])
    beta, a1, a2, m = cache["beta"], cache["a1"], cache["a2"], cache["m"]
    lam_vec = np.linalg.solve(cache["mat"], gbeta)
    la1, la2 = a1 @ lam_vec, a2 @ lam_vec
    r1 = cache["xp"] - a1 @ beta
    r2 = cache["yp"] - a2 @ beta
    gm = la1 * r1 + la2 * r2
    # d/dxp through b and the two xp-dependent entries of a1
    xh, yh = cache["xh"], cache["yh"]
    ga1_6 = m * (lam_vec[6] * r1 - la1 * beta[6])
    ga1_7 = m * (lam_vec[7] * r1 - la1 * beta[7])
    ga2_6 = m * (lam_vec[6] * r2 - la2 * beta[6])
    ga2_7 = m * (lam_vec[7] * r2 - la2 * beta[7])
    gxp = m * la1 - ga1_6 * xh - ga1_7 * yh
    gyp = m * la2 - ga2_6 * xh - ga2_7 * yh
    gu = np.stack([gxp / s[0], gyp / s[1]])  # (2, n)

    p, offs, u = cache["p"], cache["offs"], cache["u"]
    proj = offs @ gu  # (K, n): sum_c o_kc g_c
    gcv = p * (proj - (gu * u).sum(axis=0)[None]) / cache["temperature"]

    if grad_vis is not None:
        gm = gm + np.asarray(grad_vis, dtype=float).ravel()
    v, pri = cache["v"], cache["pri"]
    gz = (gm * pri * v * (1.0 - v))[:, None]
    gh1, grads["vis.w2"], grads["vis.b2"] = nn.dense_backward(gz, cache["c2"])
    gpre = nn.leaky_relu_backward(gh1, cache["ca"])
    gphi, grads["vis.w1"], grads["vis.b1"] = nn.dense_backward(gpre, cache["c1"])
    k = p.shape[0]
    valid = cache["valid"]
    gtop = gphi[:, :HEAD_TOPK].T
    order = cache["order"]
    topvalid = np.take_along_axis(valid, order, axis=0)
    np.put_along_axis(gcv, order, np.take_along_axis(gcv, order, axis=0) + np.where(topvalid, gtop, 0.0),
                      axis=0)
    gcv[k // 2] += gphi[:, HEAD_TOPK]
    gcv += np.where(valid, gphi[:, HEAD_TOPK + 1][None] / np.maximum(cache["nvalid"], 1)[None], 0.0)
    gcv = np.where(valid, gcv, 0.0)
    return grads, gcv.reshape(k, h, w)


def estimate_increment_learned(cv, head_params, prior=None, cfg=None):
    """Learned-head increment: 8 corner outputs and per-pixel visibility."""
    h, w = cv.shape
    prior = np.ones((h, w)) if prior is None else prior
    disp, vis, _ = learned_head_forward(cv, prior, head_params, cfg)
    try:
        hs = geo.four_point_to_homography(disp, (w, h))
    except DegenerateQuad:
        hs = None
    return IncrementEstimate(disp, vis, 0.0, hs)


# ---------------------------------------------------------------- refinement

def refine(template_r, template_t, extractor, cfg=None, f_r=None, f_t=None):
    """Small increment by robust Gauss-Newton alignment of the two feature maps.

    Minimises sum_x w(x) |f_r(H x) - f_t(x)|^2 over the eight homography
    parameters (tracked -> reference, normalized coordinates) with Tukey
    reweighting; no cost volume is built.
    """
    from .features import extract

    cfg = cfg or RefineConfig()
    if f_r is None:
        f_r = extract(template_r, extractor)
    if f_t is None:
        f_t = extract(template_t, extractor)
    mask_t = template_t.mask if hasattr(template_t, "mask") else np.ones(f_t.shape[1:])
    c, h, w = f_t.shape
    gy, gx = np.gradient(f_r, axis=(1, 2))
    stack = np.ascontiguousarray(np.moveaxis(np.concatenate([f_r, gx, gy]), 0, -1))
    xh, yh, s = _normalized_grid(w, h)
    beta = BETA_IDENTITY.copy()
    ft = f_t.reshape(c, -1)
    mt = mask_t.ravel() > 0.5
    n = h * w
    for _ in range(cfg.gn_iterations):
        X = beta[0] * xh + beta[1] * yh + beta[2]
        Y = beta[3] * xh + beta[4] * yh + beta[5]
        D = beta[6] * xh + beta[7] * yh + 1.0
        front = D > 1e-6
        Ds = np.where(front, D, 1.0)
        qxh, qyh = X / Ds, Y / Ds
        qx = (qxh + 1.0) * s[0]
        qy = (qyh + 1.0) * s[1]
        smp, valid = bilinear_sample(stack, qx, qy)
        smp = smp.reshape(n, 3 * c).T
        fr, gxs, gys = smp[:c], smp[c:2 * c] * s[0], smp[2 * c:] * s[1]
        e = fr - ft
        ok = valid & front & mt
        rn = np.sqrt((e * e).sum(axis=0))
        if ok.sum() < 16:
            break
        sigma = max(MAD_SCALE * float(np.median(rn[ok])), 1e-6)
        wt = np.where(ok, tukey_weights(rn, TUKEY_C * sigma), 0.0)
        dq = np.zeros((2, 8, n))
        dq[0, 0], dq[0, 1], dq[0, 2] = xh / Ds, yh / Ds, 1.0 / Ds
        dq[1, 3], dq[1, 4], dq[1, 5] = xh / Ds, yh / Ds, 1.0 / Ds
        dq[0, 6], dq[0, 7] = -qxh * xh / Ds, -qxh * yh / Ds
        dq[1, 6], dq[1, 7] = -qyh * xh / Ds, -qyh * yh / Ds
        # channel sums first: J^T W J only needs per-pixel gradient moments
        gxx = (gxs * gxs).sum(axis=0) * wt
        gxy = (gxs * gys).sum(axis=0) * wt
        gyy = (gys * gys).sum(axis=0) * wt
        ex = (gxs * e).sum(axis=0) * wt
        ey = (gys * e).sum(axis=0) * wt
        a, b = dq[0], dq[1]
        hess = (a * gxx) @ a.T + (a * gxy) @ b.T + (b * gxy) @ a.T + (b * gyy) @ b.T
        hess += cfg.damping * n * np.eye(8)
        grad = a @ ex + b @ ey
        step = -np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) * max(s) < cfg.tol:
            break
    hn = np.append(beta, 1.0).reshape(3, 3)
    norm = np.array([[1 / s[0], 0, -1.0], [0, 1 / s[1], -1.0], [0, 0, 1.0]])
    hs = geo.canonical(np.linalg.inv(norm) @ hn @ norm)
    warped, valid, _ = warp_features(f_r, hs)
    num = (warped * f_t).sum(axis=0)
    den = np.sqrt((warped ** 2).sum(axis=0) * (f_t ** 2).sum(axis=0)) + 1e-12
    vis = (valid & (mask_t > 0.5) & (num / den >= cfg.vis_cos)).astype(float)
    disp4 = geo.homography_to_four_point(hs, (w, h))
    resid = np.sqrt(((warped - f_t) ** 2).sum(axis=0))
    rms = float(np.sqrt(np.mean(resid[vis > 0] ** 2))) if vis.any() else float("inf")
    return IncrementEstimate(disp4, vis, rms, hs, extras={"feature_rms": rms})


def learned_cost_volume(f_t, f_r, d_max):
    """Cost volume anchored on the tracked template (tracked -> reference offsets)."""
    return build_cost_volume(f_t, f_r, d_max)
