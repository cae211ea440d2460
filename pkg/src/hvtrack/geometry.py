"""Homography algebra and the four-corner parameterization.

Homographies are plain 3x3 float arrays; quads and four-point displacements
are (4, 2) arrays ordered clockwise from the top-left corner. A template of
size W x H has corners (0, 0), (W-1, 0), (W-1, H-1), (0, H-1) (pixel-center
convention), which is the convention used by every sampler in the package.
"""

import numpy as np

from .errors import DegenerateQuad, PointAtInfinity, Singular

DET_EPS = 1e-12
MIN_QUAD_AREA = 16.0


def canonical(h):
    """Scale ``h`` to h33 = 1, or to unit Frobenius norm with positive trace."""
    h = np.asarray(h, dtype=float)
    if abs(h[2, 2]) > 1e-9:
        return h / h[2, 2]
    h = h / np.linalg.norm(h)
    if np.trace(h) < 0:
        h = -h
    return h


def identity():
    return np.eye(3)


def translation(tx, ty):
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def scaling(sx, sy=None):
    sy = sx if sy is None else sy
    return np.diag([float(sx), float(sy), 1.0])


def template_corners(size):
    """Corners of a template of ``size = (W, H)``."""
    w, h = size
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def apply(h, pts, check=True):
    """Map (N, 2) points through ``h`` with perspective division."""
    pts = np.asarray(pts, dtype=float)
    q = pts.reshape(-1, 2) @ h[:, :2].T + h[:, 2]
    w = q[:, 2:]
    if check and np.any(np.abs(w) < 1e-12):
        raise PointAtInfinity("point maps onto the line at infinity")
    return (q[:, :2] / w).reshape(pts.shape)


def quad_area(quad):
    """Signed shoelace area; positive for the clockwise-from-top-left order in image coordinates."""
    q = np.asarray(quad, dtype=float)
    x, y = q[:, 0], q[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def is_valid_quad(quad, min_area=MIN_QUAD_AREA):
    q = np.asarray(quad, dtype=float)
    if q.shape != (4, 2) or not np.all(np.isfinite(q)):
        return False
    e = np.roll(q, -1, axis=0) - q
    cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
    if not np.all(cross > 0):
        return False
    return quad_area(q) >= min_area


def check_quad(quad, min_area=MIN_QUAD_AREA):
    if not is_valid_quad(quad, min_area):
        raise DegenerateQuad(f"not a convex clockwise quad with area >= {min_area}: {np.asarray(quad).tolist()}")
    return np.asarray(quad, dtype=float)


def _similarity_normalizer(pts):
    n = len(pts)
    c = pts.sum(axis=0) / n
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).sum() / n
    if d < 1e-15:
        raise DegenerateQuad("coincident points")
    s = np.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _solve_linear(a, b):
    """Dense solve that treats a numerically rank-deficient system as degenerate."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > 1e12:
        raise DegenerateQuad("rank-deficient correspondence system")
    return np.linalg.solve(a, np.asarray(b, dtype=float))


def solve_homography(src, dst):
    """Exact homography mapping four ``src`` points onto four ``dst`` points."""
    src = np.asarray(src, dtype=float).reshape(4, 2)
    dst = np.asarray(dst, dtype=float).reshape(4, 2)
    ts = _similarity_normalizer(src)
    td = _similarity_normalizer(dst)
    s = apply(ts, src, check=False)
    d = apply(td, dst, check=False)
    a = np.zeros((8, 8))
    a[0::2, 0:2] = s
    a[0::2, 2] = 1.0
    a[1::2, 3:5] = s
    a[1::2, 5] = 1.0
    a[0::2, 6:8] = -d[:, :1] * s
    a[1::2, 6:8] = -d[:, 1:] * s
    b = d.ravel()
    p = _solve_linear(a, b)
    hn = np.append(p, 1.0).reshape(3, 3)
    h = np.linalg.solve(td, hn @ ts)
    h = canonical(h)
    if abs(np.linalg.det(h / np.linalg.norm(h))) < DET_EPS:
        raise DegenerateQuad("correspondences define a singular map")
    return h


def compose(a, b):
    """Homography applying ``b`` first, then ``a``."""
    return canonical(np.asarray(a, dtype=float) @ np.asarray(b, dtype=float))


def invert(h):
    h = np.asarray(h, dtype=float)
    hn = h / np.linalg.norm(h)
    if abs(np.linalg.det(hn)) < DET_EPS:
        raise Singular("homography is not invertible")
    return canonical(np.linalg.inv(hn))


def four_point_to_homography(disp, size):
    corners = template_corners(size)
    return solve_homography(corners, corners + np.asarray(disp, dtype=float).reshape(4, 2))


def homography_to_four_point(h, size):
    corners = template_corners(size)
    return apply(h, corners) - corners


def normalization_homography(quad, size):
    """Homography taking frame points inside ``quad`` to template coordinates."""
    return solve_homography(quad, template_corners(size))


def surrogate_update(h_jn, h_ij_s):
    """Fold a template-space increment into the current sampling homography."""
    return compose(h_ij_s, h_jn)


def recover_full_homography(h_in, h_jn):
    """Frame-to-frame homography from the reference and current sampling maps."""
    return compose(invert(h_in), h_jn)


def level_scaling(template_size, level_size):
    """Map full-template coordinates onto a pyramid level (corner-aligned)."""
    w, h = template_size
    lw, lh = level_size
    return scaling((lw - 1.0) / (w - 1.0), (lh - 1.0) / (h - 1.0))


def to_level(h_full, template_size, level_size):
    """Express a template-space homography in level coordinates."""
    s = level_scaling(template_size, level_size)
    return canonical(s @ h_full @ np.linalg.inv(s))


def from_level(h_level, template_size, level_size):
    s = level_scaling(template_size, level_size)
    return canonical(np.linalg.inv(s) @ h_level @ s)


def corner_error(a, b, points):
    """Max distance between the images of ``points`` under two homographies."""
    return float(np.max(np.linalg.norm(apply(a, points) - apply(b, points), axis=1)))


def format_homography(h):
    return " ".join(repr(float(v)) for v in np.asarray(h, dtype=float).ravel())


def parse_homography(text):
    vals = [float(t) for t in text.split()]
    if len(vals) != 9:
        raise ValueError(f"expected 9 values, got {len(vals)}")
    return np.array(vals).reshape(3, 3)
