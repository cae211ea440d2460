"""Image buffers, bilinear warping, planar-object sampling and augmentation.

Images are float arrays in [0, 1] of shape (H, W) or (H, W, C). Homographies
passed to :func:`warp_bilinear` map OUTPUT pixel coordinates to SOURCE pixel
coordinates; sampling homographies (frame -> template) are inverted first.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo

PYRAMID_LEVELS = (30, 60, 120)
TEMPLATE_SIZE = 120
REC601 = np.array([0.299, 0.587, 0.114])


@dataclass
class Template:
    image: np.ndarray
    mask: np.ndarray
    sampling_h: np.ndarray
    level: int
    template_size: int = TEMPLATE_SIZE

    @property
    def size(self):
        return self.image.shape[1], self.image.shape[0]


@dataclass
class PhotometricParams:
    brightness: float = 0.0
    contrast: float = 1.0
    saturation: float = 1.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0

    def as_dict(self):
        return dict(self.__dict__)


@dataclass
class AugmentRanges:
    brightness: tuple = (-0.2, 0.2)
    contrast: tuple = (0.7, 1.3)
    saturation: tuple = (0.6, 1.4)
    blur_sigma: tuple = (0.0, 1.5)
    noise_std: tuple = (0.0, 0.01)


def check_image(img):
    img = np.asarray(img, dtype=float)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise ValueError(f"unsupported image shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite samples")
    return img


def to_gray(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        return img
    if img.shape[2] == 1:
        return img[..., 0]
    return img[..., :3] @ REC601


def read_image(path, gray=False):
    """Load an 8-bit PNG/PGM (or any Pillow format) as floats in [0, 1]."""
    from PIL import Image  # file I/O only; pure geometry never needs Pillow

    with Image.open(path) as im:
        if im.mode in ("L", "LA", "I", "I;16", "1"):
            arr = np.asarray(im.convert("L"), dtype=float) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=float) / 255.0
    return to_gray(arr) if gray else arr


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img):
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    from PIL import Image

    Image.fromarray(arr).save(path)


def write_mask(path, mask):
    """Binary mask as an 8-bit image with values {0, 255}."""
    from PIL import Image

    Image.fromarray(np.where(np.asarray(mask) >= 0.5, 255, 0).astype(np.uint8)).save(path)


def read_mask(path):
    from PIL import Image

    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(float)


def pixel_grid(width, height):
    ys, xs = np.mgrid[0:height, 0:width].astype(float)
    return xs, ys


def bilinear_sample(src, xs, ys):
    """Sample ``src`` at float coordinates; returns (values, validity)."""
    h, w = src.shape[:2]
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xc = np.where(valid, xs, 0.0)
    yc = np.where(valid, ys, 0.0)
    x0 = np.minimum(np.floor(xc).astype(int), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(int), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xc - x0
    ay = yc - y0
    flat = src.reshape(h * w, -1)
    i00 = (y0 * w + x0).ravel()
    i01 = (y0 * w + x1).ravel()
    i10 = (y1 * w + x0).ravel()
    i11 = (y1 * w + x1).ravel()
    axf = ax.reshape(-1, 1)
    ayf = ay.reshape(-1, 1)
    f00, f10 = flat[i00], flat[i10]
    top = f00 + (flat[i01] - f00) * axf
    bot = f10 + (flat[i11] - f10) * axf
    out = top + (bot - top) * ayf
    out = np.where(valid.reshape(-1, 1), out, 0.0)
    out = out.reshape(xs.shape + src.shape[2:])
    return out, valid


def warp_coords(h, width, height):
    xs, ys = pixel_grid(width, height)
    x = h[0, 0] * xs + h[0, 1] * ys + h[0, 2]
    y = h[1, 0] * xs + h[1, 1] * ys + h[1, 2]
    z = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    front = z > 1e-12
    zs = np.where(front, z, 1.0)
    sx = np.where(front, x / zs, -1.0)
    sy = np.where(front, y / zs, -1.0)
    return sx, sy


def warp_bilinear(src, h, out_size):
    """Warp ``src`` into an ``out_size = (W, H)`` image; ``h`` maps output -> source."""
    src = np.asarray(src, dtype=float)
    sx, sy = warp_coords(np.asarray(h, dtype=float), out_size[0], out_size[1])
    out, valid = bilinear_sample(src, sx, sy)
    return out, valid.astype(float)


def sample_planar_object(frame, sampling_h, level=TEMPLATE_SIZE, template_size=TEMPLATE_SIZE):
    """Sample the object into a ``level x level`` template.

    ``sampling_h`` maps frame pixels to full-size template coordinates; the
    level is corner-aligned with the full template.
    """
    size = (template_size, template_size)
    h_level = geo.level_scaling(size, (level, level)) @ np.asarray(sampling_h, dtype=float)
    img, mask = warp_bilinear(frame, geo.invert(h_level), (level, level))
    return Template(img, mask, np.asarray(sampling_h, dtype=float), level, template_size)


def build_template_pyramid(frame, sampling_h, levels=PYRAMID_LEVELS, template_size=TEMPLATE_SIZE):
    """One template per level, each sampled directly from ``frame``."""
    return [sample_planar_object(frame, sampling_h, lv, template_size) for lv in levels]


def gaussian_kernel(sigma):
    radius = max(1, int(np.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img, kernel, axis):
    r = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    p = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for i, wgt in enumerate(kernel):
        out += wgt * np.take(p, np.arange(i, i + n), axis=axis)
    return out


def gaussian_blur(img, sigma):
    """Separable Gaussian blur (truncated at 4 sigma, symmetric boundary)."""
    if sigma < 1e-3:  # narrower than any pixel: a no-op
        return np.array(img, dtype=float)
    k = gaussian_kernel(sigma)
    return _convolve_axis(_convolve_axis(np.asarray(img, dtype=float), k, 0), k, 1)


def sample_photometric(rng, ranges=None):
    ranges = ranges or AugmentRanges()
    return PhotometricParams(
        brightness=float(rng.uniform(*ranges.brightness)),
        contrast=float(rng.uniform(*ranges.contrast)),
        saturation=float(rng.uniform(*ranges.saturation)),
        blur_sigma=float(rng.uniform(*ranges.blur_sigma)),
        noise_std=float(rng.uniform(*ranges.noise_std)),
    )


def photometric_augment(img, params, rng=None):
    """Blur, saturation, contrast (about mid-gray), brightness, noise; clamped to [0, 1]."""
    out = gaussian_blur(img, params.blur_sigma)
    if out.ndim == 3 and out.shape[2] == 3 and params.saturation != 1.0:
        gray = to_gray(out)[..., None]
        out = gray + params.saturation * (out - gray)
    if params.contrast != 1.0:
        out = (out - 0.5) * params.contrast + 0.5
    if params.brightness != 0.0:
        out = out + params.brightness
    if params.noise_std > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        out = out + rng.normal(0.0, params.noise_std, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def composite(frame, overlay, h_ij, vis=None, h_in=None):
    """Paste ``overlay`` (a reference-template-sized image) onto ``frame``.

    Frame pixel p receives the overlay sampled at H_i^n H_ij p when that
    template location is inside the template and marked visible in ``vis``
    (nearest-pixel lookup of the binary mask).
    """
    frame = np.asarray(frame, dtype=float)
    overlay = np.asarray(overlay, dtype=float)
    h_in = geo.identity() if h_in is None else h_in
    if frame.ndim == 2 and overlay.ndim == 3:
        overlay = to_gray(overlay)
    elif frame.ndim == 3 and overlay.ndim == 2:
        overlay = np.repeat(overlay[..., None], frame.shape[2], axis=2)
    fh, fw = frame.shape[:2]
    oh, ow = overlay.shape[:2]
    to_template = geo.compose(h_in, h_ij)
    sx, sy = warp_coords(to_template, fw, fh)
    warped, inside = bilinear_sample(overlay, sx, sy)
    gate = inside
    if vis is not None:
        vis = np.asarray(vis) >= 0.5
        vh, vw = vis.shape
        # vis may live on a pyramid level smaller than the overlay
        vx = np.rint(sx * (vw - 1) / max(ow - 1, 1)).astype(int)
        vy = np.rint(sy * (vh - 1) / max(oh - 1, 1)).astype(int)
        ok = inside & (vx >= 0) & (vx < vw) & (vy >= 0) & (vy < vh)
        looked = np.zeros_like(inside)
        looked[ok] = vis[vy[ok], vx[ok]]
        gate = ok & looked
    if frame.ndim == 3:
        gate = gate[..., None]
    return np.where(gate, warped, frame)


def resize(img, size):
    """Corner-aligned bilinear resize to ``size = (W, H)``."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape[:2]
    s = geo.scaling((w - 1.0) / (size[0] - 1.0), (h - 1.0) / (size[1] - 1.0))
    out, _ = warp_bilinear(img, s, size)
    return out


def fill_polygon(img, polygon, texture):
    """Paint ``texture`` (same shape as ``img``) inside ``polygon`` (pixel centers)."""
    from .estimation import points_in_polygon

    h, w = img.shape[:2]
    xs, ys = pixel_grid(w, h)
    inside = points_in_polygon(xs, ys, polygon)
    if img.ndim == 3:
        inside = inside[..., None]
    return np.where(inside, texture, img)
