"""Synthetic pair/sequence generation, evaluation metrics and benchmark file formats."""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .config import Config
from .errors import DegenerateDataset, DegenerateQuad, LengthMismatch, ParseError
from .estimation import gt_visibility
from .imaging import (PhotometricParams, build_template_pyramid, fill_polygon, gaussian_blur,
                      photometric_augment, resize, sample_photometric, to_gray, warp_bilinear)

BUILTIN_IMAGES = ("astronaut", "camera", "coffee", "chelsea", "rocket", "coins", "moon", "brick",
                  "grass", "gravel", "cell", "clock", "hubble_deep_field",
                  "immunohistochemistry", "retina")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".pgm", ".ppm", ".bmp", ".tif", ".tiff")


# ---------------------------------------------------------------- corpus

def builtin_corpus(names=BUILTIN_IMAGES):
    """Natural images shipped with scikit-image, as floats in [0, 1]."""
    import skimage.data

    out = []
    for name in names:
        img = np.asarray(getattr(skimage.data, name)(), dtype=float)
        if img.max() > 1.0:
            img = img / 255.0
        if img.ndim == 3:
            img = img[..., :3]
        out.append((name, img))
    return out


def load_corpus(path):
    from .imaging import read_image

    if path == "builtin":
        return builtin_corpus()
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_EXTS))
    if not names:
        raise FileNotFoundError(f"no images in {path}")
    return [(n, read_image(os.path.join(path, n))) for n in names]


def random_crop(corpus, rng, min_frac=0.35):
    """A random square crop of a random corpus image; returns (crop, provenance)."""
    i = int(rng.integers(len(corpus)))
    name, img = corpus[i]
    h, w = img.shape[:2]
    side = int(min(h, w) * rng.uniform(min_frac, 1.0))
    side = max(side, min(32, h, w))
    y0 = int(rng.integers(0, h - side + 1))
    x0 = int(rng.integers(0, w - side + 1))
    return img[y0:y0 + side, x0:x0 + side], {"source": name, "index": i, "crop": [x0, y0, side]}


def procedural_texture(rng, size):
    """Band-limited noise texture; used when no texture pool is available."""
    img = np.zeros((size, size))
    for sigma, amp in ((1.0, 0.4), (3.0, 0.8), (8.0, 1.0)):
        img += amp * gaussian_blur(rng.normal(size=(size, size)), sigma) * sigma
    img -= img.min()
    return img / max(img.max(), 1e-9)


# ---------------------------------------------------------------- pair generation

@dataclass
class TrainingSample:
    ref_templates: dict
    trk_templates: dict
    gt_disp: np.ndarray
    gt_vis: dict
    provenance: dict
    quad_ref: np.ndarray = None  # true object quad in the tracked frame
    quad_init: np.ndarray = None  # perturbed quad used to sample the tracked template
    occluders: list = field(default_factory=list)
    ref_frame: np.ndarray = None
    trk_frame: np.ndarray = None

    @property
    def reference_template(self):
        return self.ref_templates[max(self.ref_templates)]

    @property
    def tracked_template(self):
        return self.trk_templates[max(self.trk_templates)]


def window_quad(frame_size, template_size):
    o = (frame_size - template_size) / 2.0
    return geo.template_corners((template_size, template_size)) + o


def random_convex_polygon(rng, center, area, n_vertices):
    """Polygon inscribed in a random ellipse, scaled to ``area``."""
    for _ in range(100):
        ang = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
        gaps = np.diff(np.append(ang, ang[0] + 2 * np.pi))
        if gaps.max() < 0.8 * np.pi:
            break
    else:
        ang = np.linspace(0, 2 * np.pi, n_vertices, endpoint=False)
    aspect = rng.uniform(0.5, 1.0)
    rot = rng.uniform(0, np.pi)
    pts = np.stack([np.cos(ang), aspect * np.sin(ang)], axis=1)
    c, s = np.cos(rot), np.sin(rot)
    pts = pts @ np.array([[c, s], [-s, c]])
    a = abs(geo.quad_area(pts)) if n_vertices == 4 else abs(_poly_area(pts))
    pts *= np.sqrt(area / max(a, 1e-9))
    return pts + np.asarray(center, dtype=float)


def _poly_area(p):
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _match_channels(img, like):
    if like.ndim == 2 and img.ndim == 3:
        return to_gray(img)
    if like.ndim == 3 and img.ndim == 2:
        return np.repeat(img[..., None], like.shape[2], axis=2)
    return img


def generate_pair(source, cfg=None, seed=0, texture_pool=None, source_id=None):
    """One reference/tracked template pair with ground-truth motion and visibility.

    The source is resized to a square frame; the object is the centred
    template-sized window. The tracked template is sampled from the
    augmented, occluded copy through the window with its corners perturbed
    uniformly in [-perturbation, perturbation].
    """
    cfg = cfg or Config()
    rng = np.random.default_rng(seed)
    fs, t = cfg.frame_size, cfg.template_size
    frame = resize(np.asarray(source, dtype=float), (fs, fs))
    quad = window_quad(fs, t)
    rho = cfg.perturbation
    for _ in range(50):
        pert = rng.uniform(-rho, rho, size=(4, 2)) if rho > 0 else np.zeros((4, 2))
        init = quad + pert
        if geo.is_valid_quad(init):
            break
    else:
        raise DegenerateQuad("could not draw a valid perturbed quad")

    if cfg.occluder_fraction >= 0:
        areas = [cfg.occluder_fraction * t * t] if cfg.occluder_fraction > 0 else []
    else:
        n_occ = int(rng.integers(0, cfg.max_occluders + 1))
        areas = [rng.uniform(*cfg.occluder_area) * t * t for _ in range(n_occ)]
    occluders = []
    occluded = frame
    tex_ids = []
    for area in areas:
        nv = int(rng.integers(cfg.occluder_vertices[0], cfg.occluder_vertices[1] + 1))
        # keep the centre far enough inside that the polygon mostly covers the object
        margin = min(0.5 * np.sqrt(area), 0.5 * (t - 1))
        center = quad[0] + rng.uniform(margin, t - 1 - margin, size=2)
        poly = random_convex_polygon(rng, center, area, nv)
        if texture_pool:
            k = int(rng.integers(len(texture_pool)))
            if source_id is not None and len(texture_pool) > 1 and texture_pool[k][0] == source_id:
                k = (k + 1) % len(texture_pool)
            tex_src, _ = random_crop([texture_pool[k]], rng)
            tex = resize(tex_src, (fs, fs))
            tex_ids.append(texture_pool[k][0])
        else:
            tex = procedural_texture(rng, fs)
            tex_ids.append("procedural")
        occluded = fill_polygon(occluded, poly, _match_channels(tex, occluded))
        occluders.append(poly)

    if cfg.augment:
        p_ref, p_trk = sample_photometric(rng), sample_photometric(rng)
    else:
        p_ref, p_trk = PhotometricParams(), PhotometricParams()
    ref_frame = to_gray(photometric_augment(frame, p_ref, rng))
    trk_frame = to_gray(photometric_augment(occluded, p_trk, rng))

    h_in = geo.normalization_homography(quad, (t, t))
    h_jn = geo.normalization_homography(init, (t, t))
    ref_pyr = build_template_pyramid(ref_frame, h_in, cfg.levels, t)
    trk_pyr = build_template_pyramid(trk_frame, h_jn, cfg.levels, t)
    h_s = geo.compose(h_in, geo.invert(h_jn))
    gt_disp = geo.homography_to_four_point(h_s, (t, t))
    gt_vis = {lv: gt_visibility(quad, (fs, fs), occluders, h_jn, lv, t) for lv in cfg.levels}
    prov = {
        "source": source_id, "seed": int(seed),
        "augment_ref": p_ref.as_dict(), "augment_trk": p_trk.as_dict(),
        "occluders": [p.tolist() for p in occluders], "textures": tex_ids,
        "quad_init": init.tolist(),
    }
    return TrainingSample({tm.level: tm for tm in ref_pyr}, {tm.level: tm for tm in trk_pyr}, gt_disp,
                          gt_vis, prov, quad, init, occluders, ref_frame, trk_frame)


def generate_samples(corpus, cfg, count, seed=0, texture_pool=None):
    """``count`` samples with per-sample seeds drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2 ** 31 - 1, size=count)
    pool = texture_pool if texture_pool is not None else corpus
    for s in seeds:
        crop_rng = np.random.default_rng(int(s) + 7919)
        src, meta = random_crop(corpus, crop_rng)
        sample = generate_pair(src, cfg, int(s), pool, source_id=meta["source"])
        sample.provenance["crop"] = meta
        yield sample


def split_names(cfg):
    return ("train", "val", "test")


def split_counts(total, ratio):
    r = np.asarray(ratio, dtype=float)
    counts = np.floor(total * r / r.sum()).astype(int)
    counts[0] += total - counts.sum()
    return counts.tolist()


def write_sample(directory, name, sample):
    from .imaging import write_image, write_mask

    os.makedirs(directory, exist_ok=True)
    write_image(os.path.join(directory, f"{name}_ref_frame.png"), sample.ref_frame)
    write_image(os.path.join(directory, f"{name}_trk_frame.png"), sample.trk_frame)
    for lv, tm in sample.ref_templates.items():
        write_image(os.path.join(directory, f"{name}_ref_{lv}.png"), tm.image)
    for lv, tm in sample.trk_templates.items():
        write_image(os.path.join(directory, f"{name}_trk_{lv}.png"), tm.image)
    for lv, m in sample.gt_vis.items():
        write_mask(os.path.join(directory, f"{name}_vis_{lv}.png"), m)
    return {
        "name": name,
        "gt_disp": sample.gt_disp.tolist(),
        "quad_ref": sample.quad_ref.tolist(),
        "quad_init": sample.quad_init.tolist(),
        "provenance": sample.provenance,
    }


def write_dataset(out_dir, corpus, cfg, count=None, seed=None):
    """Write train/val/test sample trees with a JSON-lines manifest per split."""
    count = cfg.dataset_size if count is None else count
    seed = cfg.seed if seed is None else seed
    counts = split_counts(count, cfg.split)
    samples = generate_samples(corpus, cfg, count, seed)
    for split, n in zip(split_names(cfg), counts):
        d = os.path.join(out_dir, split)
        os.makedirs(d, exist_ok=True)
        with open(os.path.join(d, "manifest.jsonl"), "w") as fh:
            for i in range(n):
                rec = write_sample(d, f"{i:06d}", next(samples))
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump({"counts": dict(zip(split_names(cfg), counts)), "seed": seed,
                   "frame_size": cfg.frame_size, "template_size": cfg.template_size,
                   "levels": list(cfg.levels)}, fh, sort_keys=True)
    return counts


@dataclass
class StoredPair:
    """A pair loaded from disk: the two frames plus geometry."""
    name: str
    ref_frame: np.ndarray
    trk_frame: np.ndarray
    quad_ref: np.ndarray
    quad_init: np.ndarray
    gt_disp: np.ndarray
    occluders: list


def read_split(directory):
    from .imaging import read_image

    out = []
    with open(os.path.join(directory, "manifest.jsonl")) as fh:
        for no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), no) from exc
            name = rec["name"]
            out.append(StoredPair(
                name,
                read_image(os.path.join(directory, f"{name}_ref_frame.png"), gray=True),
                read_image(os.path.join(directory, f"{name}_trk_frame.png"), gray=True),
                np.array(rec["quad_ref"]), np.array(rec["quad_init"]), np.array(rec["gt_disp"]),
                [np.array(p) for p in rec["provenance"]["occluders"]]))
    return out


def pair_from_sample(sample, name=""):
    return StoredPair(name, sample.ref_frame, sample.trk_frame, sample.quad_ref, sample.quad_init,
                      sample.gt_disp, sample.occluders)


# ---------------------------------------------------------------- sequences

@dataclass
class SyntheticSequence:
    frames: list
    quads: list  # ground-truth quad per frame (None when absent)
    homographies: list  # reference frame -> frame j


def make_sequence(source, motions, frame_size=240, object_size=120, canvas_size=480, occluded=(),
                  occluder=None, augment=None, seed=0):
    """Frames of a planar scene seen through per-frame camera homographies.

    ``motions[j]`` maps frame-j pixels to canvas pixels relative to the
    centred view; frames listed in ``occluded`` are replaced by ``occluder``
    (default: an unrelated procedural texture) so the object is fully hidden.
    """
    rng = np.random.default_rng(seed)
    canvas = to_gray(resize(np.asarray(source, dtype=float), (canvas_size, canvas_size)))
    offset = (canvas_size - frame_size) / 2.0
    base = geo.translation(offset, offset)
    obj = window_quad(frame_size, object_size)
    obj_canvas = geo.apply(base, obj)
    frames, quads, hs = [], [], []
    hide = procedural_texture(rng, frame_size) if occluder is None else to_gray(occluder)
    for j, m in enumerate(motions):
        g = base @ np.asarray(m, dtype=float)
        img, _ = warp_bilinear(canvas, g, (frame_size, frame_size))
        if augment is not None:
            img = photometric_augment(img, augment[j], rng)
        quad_j = geo.apply(geo.invert(g), obj_canvas)
        if j in occluded:
            img = hide.copy()
        frames.append(img)
        quads.append(quad_j)
        hs.append(geo.solve_homography(quads[0], quad_j))
    return SyntheticSequence(frames, quads, hs)


def write_sequence(out_dir, seq):
    """Frames as ``frames/NNNNNN.png`` plus ``annotations.txt``; returns both paths."""
    from .imaging import write_image

    fdir = os.path.join(out_dir, "frames")
    os.makedirs(fdir, exist_ok=True)
    for j, img in enumerate(seq.frames):
        write_image(os.path.join(fdir, f"{j:06d}.png"), img)
    ann = os.path.join(out_dir, "annotations.txt")
    write_annotations(ann, SequenceAnnotation(list(enumerate(seq.quads))))
    return fdir, ann


# ---------------------------------------------------------------- metrics

def metric_ae(pred_quad, gt_quad, mode="rms"):
    """Alignment error: RMS (default) or mean of the four corner distances."""
    d = np.linalg.norm(np.asarray(pred_quad, dtype=float) - np.asarray(gt_quad, dtype=float), axis=1)
    return float(np.sqrt(np.mean(d ** 2))) if mode == "rms" else float(np.mean(d))


def metric_hd(h_pred, h_gt, reference_quad, mode="mean"):
    """Homography discrepancy over the reference corners (homographies map reference -> frame)."""
    ref = np.asarray(reference_quad, dtype=float)
    d = np.linalg.norm(geo.apply(h_pred, ref) - geo.apply(h_gt, ref), axis=1)
    return float(np.mean(d)) if mode == "mean" else float(np.sqrt(np.mean(d ** 2)))


def _present(errors):
    e = np.asarray(errors, dtype=float)
    return e[~np.isnan(e)]


def precision_curve(errors, thresholds):
    """Fraction of evaluated frames whose error is within each threshold."""
    e = _present(errors)
    t = np.asarray(thresholds, dtype=float)
    if e.size == 0:
        return np.zeros_like(t)
    return (e[None, :] <= t[:, None]).mean(axis=1)


def success_curve(errors, thresholds):
    return precision_curve(errors, thresholds)


def success_rate_at5(errors):
    e = _present(errors)
    return float(np.mean(e < 5.0)) if e.size else 0.0


def roc_auc(scores, labels):
    """Area under the ROC curve via the rank-sum statistic; ties count half."""
    scores = np.asarray(scores, dtype=float)
    pos = np.asarray(labels) > 0.5
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataset("ROC AUC needs both classes")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    # average ranks over tied groups
    _, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    ranks[order] = np.repeat(start + (counts + 1) / 2.0, counts)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass
class SequenceAnnotation:
    frames: list  # (frame_index, quad or None)
    names: list = None

    @property
    def indices(self):
        return [i for i, _ in self.frames]


def evaluate_results(results, annotation, ae_mode="rms", hd_mode="mean"):
    """Per-frame AE and HD (NaN where GT is absent).

    ``results`` holds (frame_index, h_ij) with h_ij mapping frame j to the
    reference frame; the reference quad is the first annotated frame's.
    """
    if len(results) != len(annotation.frames):
        raise LengthMismatch(f"{len(results)} results vs {len(annotation.frames)} annotated frames")
    ref = next((q for _, q in annotation.frames if q is not None), None)
    if ref is None:
        n = len(results)
        return np.full(n, np.nan), np.full(n, np.nan)
    ae, hd = [], []
    for (ri, h_ij), (ai, gt) in zip(results, annotation.frames):
        if ri != ai:
            raise LengthMismatch(f"result frame {ri} does not match annotation frame {ai}")
        if gt is None:
            ae.append(np.nan)
            hd.append(np.nan)
            continue
        h_pred = geo.invert(h_ij)
        ae.append(metric_ae(geo.apply(h_pred, ref), gt, ae_mode))
        hd.append(metric_hd(h_pred, geo.solve_homography(ref, gt), ref, hd_mode))
    return np.array(ae), np.array(hd)


# ---------------------------------------------------------------- file formats

def read_annotations(path):
    frames = []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok:
                continue
            try:
                idx = int(tok[0])
            except ValueError as exc:
                raise ParseError(f"bad frame index {tok[0]!r}", no) from exc
            if len(tok) == 2 and tok[1] == "-":
                frames.append((idx, None))
                continue
            if len(tok) != 9:
                raise ParseError(f"expected 9 fields, got {len(tok)}", no)
            try:
                q = np.array([float(v) for v in tok[1:]]).reshape(4, 2)
            except ValueError as exc:
                raise ParseError(str(exc), no) from exc
            frames.append((idx, q))
    for k, (idx, _) in enumerate(frames[1:], start=1):
        if idx != frames[k - 1][0] + 1:
            raise ParseError(f"frame indices not contiguous at {idx}")
    return SequenceAnnotation(frames)


def write_annotations(path, annotation):
    with open(path, "w") as fh:
        for idx, q in annotation.frames:
            if q is None:
                fh.write(f"{idx} -\n")
            else:
                fh.write(f"{idx} " + " ".join(repr(float(v)) for v in np.asarray(q).ravel()) + "\n")


def write_results(path, results):
    """``frame_index h11 ... h33 confidence lost_flag`` per line."""
    with open(path, "w") as fh:
        for r in results:
            fh.write(f"{r.frame_index} {geo.format_homography(r.h_ij)} {float(r.confidence)!r} "
                     f"{int(bool(r.lost))}\n")


@dataclass
class ResultRecord:
    frame_index: int
    h_ij: np.ndarray
    confidence: float
    lost: bool


def read_results(path):
    out = []
    with open(path) as fh:
        for no, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 12:
                raise ParseError(f"expected 12 fields, got {len(tok)}", no)
            try:
                out.append(ResultRecord(int(tok[0]), np.array([float(v) for v in tok[1:10]]).reshape(3, 3),
                                        float(tok[10]), bool(int(tok[11]))))
            except ValueError as exc:
                raise ParseError(str(exc), no) from exc
    return out


def write_curve(path, thresholds, fractions):
    with open(path, "w") as fh:
        fh.write("threshold,fraction\n")
        for t, f in zip(thresholds, fractions):
            fh.write(f"{float(t)!r},{float(f)!r}\n")
