"""Per-sequence tracking loop, confidence head and reboot policy."""

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from . import nn
from .config import Config
from .correlation import build_cost_volume, cost_volume_statistics, soft_argmax_decode
from .errors import (DegenerateDataset, DegenerateQuad, InsufficientSupport, QuadOutOfFrame,
                     ShapeMismatch, Singular, WeightTopologyMismatch)
from .estimation import (AnalyticConfig, HeadConfig, RefineConfig, estimate_increment_analytic,
                         learned_head_forward, refine)
from .features import AdamConfig, AdamState, adam_step, extract, make_extractor
from .imaging import sample_planar_object, to_gray

STATS_PER_LEVEL = 5


# ---------------------------------------------------------------- confidence head

@dataclass
class ConfidenceHead:
    params: dict
    dropout: float = 0.5

    @property
    def n_inputs(self):
        return self.params["w1"].shape[0]


def init_confidence_head(n_inputs=15, hidden=16, seed=0, zero=False, dropout=0.5):
    rng = np.random.default_rng(seed)
    p = {
        "w1": np.zeros((n_inputs, hidden)) if zero else rng.normal(0, np.sqrt(2.0 / n_inputs), (n_inputs, hidden)),
        "b1": np.zeros(hidden),
        "w2": np.zeros((hidden, 1)) if zero else rng.normal(0, np.sqrt(1.0 / hidden), (hidden, 1)),
        "b2": np.zeros(1),
        "mean": np.zeros(n_inputs),
        "std": np.ones(n_inputs),
    }
    return ConfidenceHead(p, dropout)


def _confidence_logits(x, p, rng=None, rate=0.0):
    xs = (x - p["mean"]) / p["std"]
    pre, c1 = nn.dense(xs, p["w1"], p["b1"])
    hid, ca = nn.leaky_relu(pre)
    hid_d, keep = nn.dropout(hid, rate, rng)
    z, c2 = nn.dense(hid_d, p["w2"], p["b2"])
    return z[:, 0], (c1, ca, keep, c2)


def _confidence_backward(gz, cache):
    c1, ca, keep, c2 = cache
    gh, gw2, gb2 = nn.dense_backward(gz[:, None], c2)
    gh = nn.dropout_backward(gh, keep)
    gpre = nn.leaky_relu_backward(gh, ca)
    _, gw1, gb1 = nn.dense_backward(gpre, c1)
    return {"w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2}


def confidence_score(stats, head):
    """Reliability in [0, 1] (logistic output; dropout is never applied here)."""
    x = np.atleast_2d(np.asarray(stats, dtype=float))
    if x.shape[1] != head.n_inputs:
        raise ShapeMismatch(f"statistics have {x.shape[1]} entries, head expects {head.n_inputs}")
    z, _ = _confidence_logits(x, head.params)
    p = nn.sigmoid(z)
    return float(p[0]) if np.ndim(stats) == 1 else p


def confidence_label(l_d, threshold=5.0):
    """1 = reliable (corner loss at most the threshold), 0 = unreliable."""
    return (np.asarray(l_d) <= threshold).astype(float) if np.ndim(l_d) else float(l_d <= threshold)


def confidence_loss(p, target, eps=1e-7):
    p = np.clip(np.asarray(p, dtype=float), eps, 1 - eps)
    return float(-np.mean(target * np.log(p) + (1 - target) * np.log(1 - p)))


def train_confidence(stats, labels, head=None, epochs=150, batch_size=32, lr=1e-3, seed=0, dropout=0.5,
                     hidden=16):
    """Fit the statistics head with cross-entropy, Adam and dropout on the hidden layer."""
    x = np.asarray(stats, dtype=float)
    y = np.asarray(labels, dtype=float)
    if len(np.unique(y)) < 2:
        raise DegenerateDataset("confidence training needs both reliable and unreliable samples")
    head = head or init_confidence_head(x.shape[1], hidden, seed=seed, dropout=dropout)
    p = {k: v.copy() for k, v in head.params.items()}
    p["mean"] = x.mean(axis=0)
    p["std"] = x.std(axis=0) + 1e-6
    rng = np.random.default_rng(seed)
    cfg = AdamConfig(lr=lr, decay_every=10 ** 9)
    state = AdamState()
    trainable = ("w1", "b1", "w2", "b2")
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start:start + batch_size]
            z, cache = _confidence_logits(x[idx], p, rng, head.dropout)
            _, gz = nn.bce_with_logits(z, y[idx])
            grads = _confidence_backward(gz, cache)
            sub = {k: p[k] for k in trainable}
            sub, state = adam_step(sub, grads, state, cfg)
            p.update(sub)
    return ConfidenceHead(p, head.dropout)


def confidence_to_tensors(head, prefix="confidence."):
    return {prefix + k: v for k, v in head.params.items()}


def confidence_from_tensors(tensors, prefix="confidence."):
    p = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    need = ("w1", "b1", "w2", "b2", "mean", "std")
    missing = [k for k in need if k not in p]
    if missing:
        raise WeightTopologyMismatch(f"confidence head missing {missing}")
    if p["w2"].ndim == 1:
        p["w2"] = p["w2"][:, None]
    if p["w1"].shape[1] != p["b1"].shape[0] or p["w2"].shape[0] != p["b1"].shape[0]:
        raise WeightTopologyMismatch("confidence head hidden sizes disagree")
    return ConfidenceHead(p)


# ---------------------------------------------------------------- model bundle

@dataclass
class Model:
    extractor: object
    head: dict = None  # learned head parameters; None selects the analytic head
    confidence: ConfidenceHead = None
    convnet: object = None

    @classmethod
    def from_config(cls, cfg, convnet=None, head=None, confidence=None):
        kind = "convnet" if (convnet is not None and cfg.extractor == "convnet") else cfg.extractor
        if kind == "convnet" and convnet is None:
            raise WeightTopologyMismatch("config selects the convnet extractor but no weights were given")
        extractor = make_extractor(kind, convnet)
        use_head = head if cfg.head == "learned" else None
        if cfg.head == "learned" and head is None:
            raise WeightTopologyMismatch("config selects the learned head but no head weights were given")
        return cls(extractor, use_head, confidence, convnet)


@dataclass
class Reference:
    frame_size: tuple
    quad: np.ndarray
    h_in: np.ndarray
    templates: dict
    features: dict


@dataclass
class TrackState:
    reference: Reference
    h_in: np.ndarray
    h_jn: np.ndarray
    ring: deque
    frame_index: int = 0
    model: Model = None
    cfg: Config = None


@dataclass
class FrameResult:
    frame_index: int
    h_ij: np.ndarray
    quad: np.ndarray
    vis: np.ndarray
    confidence: float
    reboot_count: int
    lost: bool
    h_jn: np.ndarray = None
    level_updates: list = field(default_factory=list)


@dataclass
class PipelineOutput:
    h_jn: np.ndarray
    vis: np.ndarray
    stats: np.ndarray
    confidence: float
    h_before_refine: np.ndarray = None


def _all_levels(cfg):
    return sorted(set(cfg.levels) | set(cfg.stats_levels) | {cfg.template_size})


def prepare_reference(frame, quad, model, cfg):
    frame = to_gray(frame)
    fh, fw = frame.shape
    quad = geo.check_quad(quad)
    if np.any(quad < 0) or np.any(quad[:, 0] > fw - 1) or np.any(quad[:, 1] > fh - 1):
        raise QuadOutOfFrame(f"quad {quad.tolist()} leaves the {fw}x{fh} frame")
    t = cfg.template_size
    h_in = geo.normalization_homography(quad, (t, t))
    templates, feats = {}, {}
    for lv in _all_levels(cfg):
        tm = sample_planar_object(frame, h_in, lv, t)
        templates[lv] = tm
        feats[lv] = extract(tm, model.extractor)
    return Reference((fw, fh), quad, h_in, templates, feats)


def init_track(reference_frame, quad, cfg=None, model=None):
    """Cache the reference templates/features and start with zero motion."""
    cfg = cfg or Config()
    model = model or Model.from_config(cfg)
    ref = prepare_reference(reference_frame, quad, model, cfg)
    ring = deque(maxlen=cfg.ring_capacity)
    ring.append((0, ref.h_in.copy(), 1.0))
    return TrackState(ref, ref.h_in.copy(), ref.h_in.copy(), ring, 0, model, cfg)


def _quad_of(h_jn, t):
    return geo.apply(geo.invert(h_jn), geo.template_corners((t, t)))


def _head_increment(model, cfg, cv, mask, level):
    if model.head is None:
        field = soft_argmax_decode(cv, cfg.temperature)
        acfg = AnalyticConfig(irls_iterations=cfg.irls_iterations, residual_gate=cfg.residual_gate,
                              ratio_gate=cfg.ratio_gate)
        est = estimate_increment_analytic(field, mask, acfg)
        return est.h, est.vis
    disp, vis, _ = learned_head_forward(cv, mask, model.head, HeadConfig(cfg.temperature, cfg.head_ridge))
    return geo.four_point_to_homography(disp, (level, level)), vis


def _safe_update(h_jn, h_s_full, t, frame_size, margin=None):
    """Apply an increment unless it produces a degenerate or runaway quad."""
    try:
        new = geo.surrogate_update(h_jn, h_s_full)
        q = _quad_of(new, t)
    except (Singular, DegenerateQuad, ArithmeticError, ValueError):
        return h_jn
    if not geo.is_valid_quad(q, min_area=16.0):
        return h_jn
    fw, fh = frame_size
    margin = max(fw, fh) if margin is None else margin
    if np.any(q < -margin) or np.any(q[:, 0] > fw + margin) or np.any(q[:, 1] > fh + margin):
        return h_jn
    return new


def motion_estimate(model, cfg, ref, frame, h_jn, levels=None, refine_iterations=None, record=None):
    """Coarse-to-fine increments followed by refinement; returns the new H_j^n."""
    t = cfg.template_size
    levels = cfg.levels if levels is None else levels
    refine_iterations = cfg.refine_iterations if refine_iterations is None else refine_iterations
    for lv in levels:
        for _ in range(cfg.inner_iterations):
            tm = sample_planar_object(frame, h_jn, lv, t)
            f_t = extract(tm, model.extractor)
            cv = build_cost_volume(f_t, ref.features[lv], cfg.d_max)
            try:
                h_s, _ = _head_increment(model, cfg, cv, tm.mask, lv)
            except (InsufficientSupport, DegenerateQuad, Singular, np.linalg.LinAlgError):
                continue
            h_jn = _safe_update(h_jn, geo.from_level(h_s, (t, t), (lv, lv)), t, ref.frame_size)
    if record is not None:
        record["before_refine"] = h_jn.copy()
    rcfg = RefineConfig(gn_iterations=cfg.gn_iterations, vis_cos=cfg.refine_vis_cos)
    for _ in range(refine_iterations):
        tm = sample_planar_object(frame, h_jn, t, t)
        try:
            inc = refine(ref.templates[t], tm, model.extractor, rcfg, f_r=ref.features[t])
        except (Singular, DegenerateQuad, np.linalg.LinAlgError):
            break
        h_jn = _safe_update(h_jn, inc.h, t, ref.frame_size)
        if np.max(np.abs(inc.disp)) < rcfg.tol:
            break
    return h_jn


def evaluate_estimate(model, cfg, ref, frame, h_jn, want_stats=True):
    """Full-resolution visibility and confidence statistics at a given H_j^n."""
    t = cfg.template_size
    cvs, vis = [], None
    for lv in sorted(set(cfg.stats_levels) | {t}):
        tm = sample_planar_object(frame, h_jn, lv, t)
        f_t = extract(tm, model.extractor)
        cv = build_cost_volume(f_t, ref.features[lv], cfg.d_max)
        if lv in cfg.stats_levels:
            cvs.append((lv, cv))
        if lv == t:
            try:
                _, vis = _head_increment(model, cfg, cv, tm.mask, lv)
            except (InsufficientSupport, DegenerateQuad, Singular, np.linalg.LinAlgError):
                vis = np.zeros((t, t))
    stats = None
    if want_stats:
        cvs = [cv for lv, cv in sorted(cvs, key=lambda p: list(cfg.stats_levels).index(p[0]))]
        stats = cost_volume_statistics(cvs, cfg.stats_temperature, cfg.entropy_fraction)
    return vis, stats


def run_pipeline(model, cfg, ref, frame, h_jn):
    record = {}
    h_new = motion_estimate(model, cfg, ref, frame, h_jn, record=record)
    need_stats = model.confidence is not None
    vis, stats = evaluate_estimate(model, cfg, ref, frame, h_new, want_stats=need_stats)
    conf = confidence_score(stats, model.confidence) if need_stats else 0.5
    return PipelineOutput(h_new, vis, stats, conf, record.get("before_refine"))


def reboot_policy(state, frame_index=None):
    """Older confident H_j^n at ages ~2, 4, ..., 60 frames, nearest entry each, oldest last."""
    j = state.frame_index + 1 if frame_index is None else frame_index
    entries = list(state.ring)
    if not entries:
        return []
    ages = state.cfg.reboot_ages if state.cfg is not None else (2, 4, 8, 16, 32, 60)
    chosen = []
    for a in ages:
        target = j - a
        best = min(entries, key=lambda e: (abs(e[0] - target), e[0]))
        if all(best[0] != c[0] for c in chosen):
            chosen.append(best)
    chosen.sort(key=lambda e: j - e[0])
    return [(idx, h.copy()) for idx, h, _ in chosen]


def track_frame(state, frame):
    """Estimate the object's homography in the next frame."""
    cfg, model, ref = state.cfg, state.model, state.reference
    frame = to_gray(frame)
    j = state.frame_index + 1
    out = run_pipeline(model, cfg, ref, frame, state.h_jn)
    thr = cfg.confidence_threshold
    reboots = 0
    lost = False
    if out.confidence < thr:
        lost = True
        for _, h0 in reboot_policy(state, j):
            reboots += 1
            cand = run_pipeline(model, cfg, ref, frame, h0)
            if cand.confidence >= thr:
                out, lost = cand, False
                break
    if lost:
        h_jn = state.ring[-1][1].copy() if state.ring else state.h_in.copy()
        vis = np.zeros((cfg.template_size, cfg.template_size))
    else:
        h_jn = out.h_jn
        vis = out.vis
        state.ring.append((j, h_jn.copy(), out.confidence))
    state.h_jn = h_jn
    state.frame_index = j
    h_ij = geo.recover_full_homography(state.h_in, h_jn)
    quad = _quad_of(h_jn, cfg.template_size)
    return FrameResult(j, h_ij, quad, vis, float(out.confidence), reboots, lost, h_jn.copy())


def track_sequence(frames, quad, cfg=None, model=None):
    """Track ``frames[1:]`` from ``quad`` in ``frames[0]``; returns one result per frame.

    The first result is the reference frame itself (identity homography).
    """
    state = init_track(frames[0], quad, cfg, model)
    t = state.cfg.template_size
    first = FrameResult(0, geo.identity(), np.asarray(quad, dtype=float), np.ones((t, t)), 1.0, 0, False,
                        state.h_in.copy())
    results = [first]
    for frame in frames[1:]:
        results.append(track_frame(state, frame))
    return results
