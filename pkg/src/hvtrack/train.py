"""Two-phase training: features + learned head first, confidence head second.

Each training pair is unrolled through the pyramid as the tracker would run
it: at every level the tracked template is resampled at the current
estimate, both templates go through the shared network, and the level's
losses are back-propagated. The estimate is then advanced with the
predicted increment (no gradient flows across levels).
"""

import json
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry as geo
from .config import Config
from .correlation import build_cost_volume, cost_volume_backward
from .errors import DegenerateQuad, PointAtInfinity, Singular
from .estimation import (HeadConfig, LossWeights, gt_visibility, init_learned_head, learned_head_backward,
                         learned_head_forward, loss_alignment, loss_alignment_grad, loss_homography,
                         loss_homography_grad, loss_total, loss_visibility, loss_visibility_grad,
                         validate_head)
from .features import (AdamConfig, AdamState, ConvNetWeights, Topology, adam_step, convnet_backward,
                       convnet_forward, convnet_from_tensors, convnet_to_tensors, init_convnet,
                       load_tensors, save_tensors, standardize_input)
from .imaging import sample_planar_object
from .synthbench import generate_pair, generate_samples, pair_from_sample, random_crop
from .tracking import (Model, _quad_of, _safe_update, confidence_from_tensors, confidence_label,
                       confidence_to_tensors, evaluate_estimate, motion_estimate, prepare_reference,
                       train_confidence)

log = logging.getLogger(__name__)


@dataclass
class TrainResult:
    convnet: ConvNetWeights
    head: dict
    history: list  # per-epoch mean (total, L_d, L_m, L_v)


def _features(weights, template):
    x = standardize_input(template.image, template.mask)[None]
    f, cache = convnet_forward(weights, x)
    return f * template.mask[None], cache


def pair_losses(convnet, head, pair, cfg, want_grads=True):
    """Summed per-level losses for one stored pair, plus gradients."""
    t = cfg.template_size
    fs = pair.ref_frame.shape[1], pair.ref_frame.shape[0]
    lw = LossWeights(cfg.lambda_d, cfg.lambda_m, cfg.lambda_v)
    hcfg = HeadConfig(cfg.temperature, cfg.head_ridge)
    h_in = geo.normalization_homography(pair.quad_ref, (t, t))
    h_jn = geo.normalization_homography(pair.quad_init, (t, t))
    g_net = {k: np.zeros_like(v) for k, v in convnet.params.items()} if want_grads else None
    g_head = {k: np.zeros_like(v) for k, v in head.items()} if want_grads else None
    totals = np.zeros(4)
    for lv in cfg.levels:
        ref_tm = sample_planar_object(pair.ref_frame, h_in, lv, t)
        trk_tm = sample_planar_object(pair.trk_frame, h_jn, lv, t)
        f_r, c_r = _features(convnet, ref_tm)
        f_t, c_t = _features(convnet, trk_tm)
        cv = build_cost_volume(f_t, f_r, cfg.d_max)
        disp, m, cache = learned_head_forward(cv, trk_tm.mask, head, hcfg)
        h_gt = geo.to_level(geo.compose(h_in, geo.invert(h_jn)), (t, t), (lv, lv))
        d_gt = geo.homography_to_four_point(h_gt, (lv, lv))
        m_gt = gt_visibility(pair.quad_ref, fs, pair.occluders, h_jn, lv, t)
        l_d = loss_homography(disp, d_gt)
        l_m = loss_visibility(m, m_gt)
        l_v = loss_alignment(f_r, f_t, h_gt, m_gt)
        totals += [loss_total(l_d, l_m, l_v, lw), l_d, l_m, l_v]
        if want_grads:
            gd = lw.lambda_d * loss_homography_grad(disp, d_gt)
            gm = lw.lambda_m * loss_visibility_grad(m, m_gt) if lw.lambda_m else None
            gh, gcv = learned_head_backward(gd, gm, head, cache)
            for k, v in gh.items():
                g_head[k] += v
            g_ft, g_fr = cost_volume_backward(gcv, f_t, f_r, cfg.d_max)
            if lw.lambda_v:
                gv_r, gv_t = loss_alignment_grad(f_r, f_t, h_gt, m_gt)
                g_fr += lw.lambda_v * gv_r
                g_ft += lw.lambda_v * gv_t
            for g, c, tm in ((g_fr, c_r, ref_tm), (g_ft, c_t, trk_tm)):
                gw, _ = convnet_backward(convnet, c, g * tm.mask[None])
                for k, v in gw.items():
                    g_net[k] += v
        try:
            h_s = geo.from_level(geo.four_point_to_homography(disp, (lv, lv)), (t, t), (lv, lv))
            h_jn = _safe_update(h_jn, h_s, t, fs)
        except (DegenerateQuad, Singular, PointAtInfinity):
            pass
    return totals, g_net, g_head


def train_motion(pairs, cfg=None, convnet=None, head=None, topology=None, seed=0, max_seconds=None,
                 callback=None):
    """Adam over mini-batches of pairs; features and head are optimised jointly."""
    cfg = cfg or Config()
    rng = np.random.default_rng(seed)
    convnet = convnet or init_convnet(topology or Topology(), seed)
    head = validate_head(head or init_learned_head(seed))
    params = {"features." + k: v.copy() for k, v in convnet.params.items()}
    params.update({"head." + k: v.copy() for k, v in head.items()})
    acfg = AdamConfig(cfg.lr, cfg.beta1, cfg.beta2, decay_factor=cfg.decay_factor, decay_every=cfg.decay_every)
    state = AdamState()
    history = []
    start = time.time()

    def unpack(p):
        net = ConvNetWeights(convnet.topology, {k[9:]: v for k, v in p.items() if k.startswith("features.")})
        return net, {k[5:]: v for k, v in p.items() if k.startswith("head.")}

    out_of_time = False
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        sums = np.zeros(4)
        seen = 0
        for b0 in range(0, len(order), cfg.batch_size):
            net, hd = unpack(params)
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            batch = order[b0:b0 + cfg.batch_size]
            for i in batch:
                tot, g_net, g_head = pair_losses(net, hd, pairs[i], cfg)
                sums += tot
                seen += 1
                for k, v in g_net.items():
                    grads["features." + k] += v / len(batch)
                for k, v in g_head.items():
                    grads["head." + k] += v / len(batch)
            params, state = adam_step(params, grads, state, acfg, epoch)
            if max_seconds is not None and time.time() - start > max_seconds:
                out_of_time = True
                break
        history.append(tuple(sums / max(seen, 1)))
        log.info("epoch %d: loss %.4f (L_d %.4f, L_m %.4f, L_v %.4f)", epoch, *history[-1])
        if callback is not None:
            callback(epoch, history[-1])
        if out_of_time:
            break
    net, hd = unpack(params)
    return TrainResult(net, hd, history)


# ---------------------------------------------------------------- confidence phase

def pair_final_loss(h_in, h_jn, template_size):
    """L_d of the final estimate: the remaining corner error at full template resolution."""
    t = template_size
    resid = geo.homography_to_four_point(geo.compose(h_in, geo.invert(h_jn)), (t, t))
    return loss_homography(resid, np.zeros((4, 2)))


def confidence_sample(model, cfg, pair):
    """Track one pair from its initial quad; returns (statistics, L_d)."""
    t = cfg.template_size
    ref = prepare_reference(pair.ref_frame, pair.quad_ref, model, cfg)
    h0 = geo.normalization_homography(pair.quad_init, (t, t))
    h = motion_estimate(model, cfg, ref, pair.trk_frame, h0)
    _, stats = evaluate_estimate(model, cfg, ref, pair.trk_frame, h)
    return stats, pair_final_loss(ref.h_in, h, t)


def hard_easy_pairs(corpus, cfg, count, seed=0):
    """Mixed difficulty: half regular pairs, a quarter with doubled perturbation,
    a quarter whose tracked frame shows an unrelated image."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        s = int(rng.integers(0, 2 ** 31 - 1))
        kind = i % 4
        src, meta = random_crop(corpus, np.random.default_rng(s + 7919))
        c = cfg.with_overrides(perturbation=2 * cfg.perturbation) if kind == 2 else cfg
        sample = generate_pair(src, c, s, corpus, source_id=meta["source"])
        pair = pair_from_sample(sample, f"{i:06d}")
        if kind == 3:
            other, _ = random_crop([e for e in corpus if e[0] != meta["source"]], np.random.default_rng(s + 1))
            other_sample = generate_pair(other, c, s + 2, corpus)
            pair.trk_frame = other_sample.trk_frame
        out.append(pair)
    return out


def confidence_dataset(model, cfg, pairs):
    stats, losses = [], []
    for pair in pairs:
        st, ld = confidence_sample(model, cfg, pair)
        stats.append(st)
        losses.append(ld)
    stats = np.array(stats)
    losses = np.array(losses)
    return stats, confidence_label(losses, cfg.label_threshold), losses


def train_confidence_phase(model, cfg, corpus, count=None, seed=0):
    """Label freshly generated pairs with the trained tracker and fit the statistics head."""
    count = cfg.confidence_pairs if count is None else count
    pairs = hard_easy_pairs(corpus, cfg, count, seed)
    stats, labels, _ = confidence_dataset(model, cfg, pairs)
    return train_confidence(stats, labels, epochs=cfg.confidence_epochs, lr=cfg.confidence_lr,
                            seed=seed, dropout=cfg.confidence_dropout, hidden=cfg.confidence_hidden)


# ---------------------------------------------------------------- model files

def head_to_tensors(head, prefix="head."):
    return {prefix + k: v for k, v in head.items()}


def head_from_tensors(tensors, prefix="head."):
    head = {k[len(prefix):]: v.astype(float) for k, v in tensors.items() if k.startswith(prefix)}
    return validate_head(head) if head else None


def save_model(path, convnet=None, head=None, confidence=None):
    tensors = {}
    if convnet is not None:
        tensors.update(convnet_to_tensors(convnet))
    if head is not None:
        tensors.update(head_to_tensors(head))
    if confidence is not None:
        tensors.update(confidence_to_tensors(confidence))
    save_tensors(path, tensors)


def load_model(path, cfg):
    """Model bundle from a weight file; missing parts fall back to the config's defaults."""
    tensors = load_tensors(path)
    convnet = convnet_from_tensors(tensors) if any(k.startswith("features.") for k in tensors) else None
    head = head_from_tensors(tensors)
    conf = None
    if any(k.startswith("confidence.") for k in tensors):
        conf = confidence_from_tensors({k: v.astype(float) for k, v in tensors.items()})
    return Model.from_config(cfg, convnet=convnet, head=head, confidence=conf)


def track_pair(model, cfg, pair, levels=None, refine_iterations=None):
    """Final quad for a stored pair tracked from its perturbed initial quad."""
    t = cfg.template_size
    ref = prepare_reference(pair.ref_frame, pair.quad_ref, model, cfg)
    h0 = geo.normalization_homography(pair.quad_init, (t, t))
    h = motion_estimate(model, cfg, ref, pair.trk_frame, h0, levels=levels, refine_iterations=refine_iterations)
    return _quad_of(h, t)


def track_pair_variants(model, cfg, pair):
    """Final quads of the three ablation variants: single full-resolution level,
    pyramid, and pyramid followed by refinement (the last two share one run)."""
    t = cfg.template_size
    ref = prepare_reference(pair.ref_frame, pair.quad_ref, model, cfg)
    h0 = geo.normalization_homography(pair.quad_init, (t, t))
    single = motion_estimate(model, cfg, ref, pair.trk_frame, h0, levels=(t,), refine_iterations=0)
    record = {}
    full = motion_estimate(model, cfg, ref, pair.trk_frame, h0, record=record)
    return {"single": _quad_of(single, t), "pyramid": _quad_of(record["before_refine"], t),
            "pyramid+refine": _quad_of(full, t)}


# ---------------------------------------------------------------- desk-scale recipe

@dataclass(frozen=True)
class DeskRecipe:
    """Training schedule that fits a single CPU in well under an hour.

    The perturbation is narrower than the test split's so that the coarsest
    level's displacement stays within the cost volume's reach during training.
    """
    pairs: int = 500
    epochs: int = 4
    lr: float = 1e-3
    decay_every: int = 3  # one low-rate epoch at the end
    batch_size: int = 16
    perturbation: float = 16.0
    data_seed: int = 11
    seed: int = 0


def train_desk(corpus, recipe=DeskRecipe(), weights=LossWeights(), max_seconds=None):
    """Generate the recipe's training pairs and train features + learned head."""
    cfg = Config(lr=recipe.lr, epochs=recipe.epochs, batch_size=recipe.batch_size, head="learned",
                 extractor="convnet", perturbation=recipe.perturbation, decay_every=recipe.decay_every,
                 lambda_d=weights.lambda_d, lambda_m=weights.lambda_m, lambda_v=weights.lambda_v)
    pairs = [pair_from_sample(s) for s in generate_samples(corpus, cfg, recipe.pairs, seed=recipe.data_seed)]
    return train_motion(pairs, cfg, seed=recipe.seed, max_seconds=max_seconds)


def train_desk_to_file(path, corpus, recipe=DeskRecipe(), weights=LossWeights()):
    """Train with the recipe and save the weights plus a JSON sidecar recording
    the recipe, the loss weights and the wall-clock training time."""
    start = time.time()
    res = train_desk(corpus, recipe, weights)
    seconds = time.time() - start
    save_model(path, res.convnet, res.head)
    meta = {"recipe": asdict(recipe), "weights": asdict(weights), "seconds": seconds,
            "history": [list(h) for h in res.history]}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=1)
    return meta
