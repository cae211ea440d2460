"""Command-line front end: generate, train, track, eval, composite."""

import argparse
import logging
import os
import sys

import numpy as np

from .config import Config, apply_overrides, load_config
from .errors import TrackingError

log = logging.getLogger("hvtrack")

SUMMARY_FIELDS = ("frames", "ae_mean", "ae_median", "hd_mean", "hd_median", "success_rate_at5")


def _config(args):
    cfg = load_config(args.config) if args.config else Config()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "head", None):
        kw["head"] = args.head
    return cfg.with_overrides(**kw) if kw else cfg


def _model(cfg, weights):
    from .tracking import Model
    from .train import load_model

    if weights:
        return load_model(weights, cfg)
    return Model.from_config(cfg)


def _frame_files(directory):
    from .synthbench import IMAGE_EXTS

    names = sorted(f for f in os.listdir(directory) if f.lower().endswith(IMAGE_EXTS))
    if not names:
        raise FileNotFoundError(f"no frames in {directory}")
    return [os.path.join(directory, n) for n in names]


def _init_quad(args):
    if args.init:
        vals = [float(v) for v in args.init.replace(",", " ").split()]
        if len(vals) != 8:
            raise ValueError("--init needs 8 numbers: x1 y1 x2 y2 x3 y3 x4 y4")
        return np.array(vals).reshape(4, 2)
    if args.annotations:
        from .synthbench import read_annotations

        ann = read_annotations(args.annotations)
        for _, q in ann.frames:
            if q is not None:
                return q
    raise ValueError("an initial quad is required (--init or --annotations)")


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    from .synthbench import load_corpus, write_dataset

    cfg = _config(args)
    corpus = load_corpus(args.corpus)
    counts = write_dataset(args.out, corpus, cfg, args.count)
    print(f"wrote {sum(counts)} pairs to {args.out} (train/val/test = {counts})")
    return 0


def cmd_train(args):
    from .synthbench import load_corpus, read_split
    from .train import save_model, train_confidence_phase, train_motion
    from .tracking import Model

    cfg = _config(args).with_overrides(head="learned", extractor="convnet")
    pairs = read_split(os.path.join(args.data, "train"))
    if args.limit:
        pairs = pairs[:args.limit]
    res = train_motion(pairs, cfg, seed=cfg.seed, max_seconds=args.max_seconds)
    conf = None
    if cfg.confidence_pairs > 0:
        corpus = load_corpus(args.corpus)
        model = Model.from_config(cfg, convnet=res.convnet, head=res.head)
        conf = train_confidence_phase(model, cfg, corpus, seed=cfg.seed + 1)
    save_model(args.out, res.convnet, res.head, conf)
    print(f"saved weights to {args.out}")
    return 0


def cmd_track(args):
    from .imaging import read_image, write_mask
    from .synthbench import write_results
    from .tracking import init_track, track_frame, FrameResult
    from . import geometry as geo

    cfg = _config(args)
    model = _model(cfg, args.weights)
    files = _frame_files(args.frames)
    quad = _init_quad(args)
    state = init_track(read_image(files[0], gray=True), quad, cfg, model)
    t = cfg.template_size
    results = [FrameResult(0, geo.identity(), quad, np.ones((t, t)), 1.0, 0, False, state.h_in.copy())]
    for path in files[1:]:
        results.append(track_frame(state, read_image(path, gray=True)))
    write_results(args.out, results)
    if args.vis_dir:
        os.makedirs(args.vis_dir, exist_ok=True)
        for r in results:
            write_mask(os.path.join(args.vis_dir, f"{r.frame_index:06d}_vis.png"), r.vis)
    lost = sum(r.lost for r in results)
    print(f"tracked {len(results)} frames ({lost} lost) -> {args.out}")
    return 0


def cmd_eval(args):
    # pure geometry: no image is read here
    from .synthbench import (evaluate_results, precision_curve, read_annotations, read_results,
                             success_curve, success_rate_at5, write_curve)

    cfg = _config(args)
    del cfg
    res = read_results(args.results)
    ann = read_annotations(args.annotations)
    ae, hd = evaluate_results([(r.frame_index, r.h_ij) for r in res], ann, args.ae_mode, args.hd_mode)
    thresholds = np.arange(0, args.max_threshold + 1e-9, 1.0)
    os.makedirs(args.out, exist_ok=True)
    write_curve(os.path.join(args.out, "precision.csv"), thresholds, precision_curve(ae, thresholds))
    write_curve(os.path.join(args.out, "success.csv"), thresholds, success_curve(hd, thresholds))
    ok_ae, ok_hd = ae[~np.isnan(ae)], hd[~np.isnan(hd)]

    def stat(fn, v):
        return float(fn(v)) if v.size else float("nan")

    row = [len(ok_ae), stat(np.mean, ok_ae), stat(np.median, ok_ae), stat(np.mean, ok_hd),
           stat(np.median, ok_hd), success_rate_at5(ae)]
    with open(os.path.join(args.out, "summary.csv"), "w") as fh:
        fh.write(",".join(SUMMARY_FIELDS) + "\n")
        fh.write(",".join(repr(v) for v in row) + "\n")
    print(dict(zip(SUMMARY_FIELDS, row)))
    return 0


def cmd_composite(args):
    from .imaging import composite, read_image, read_mask, resize, write_image
    from .synthbench import read_results
    from . import geometry as geo

    cfg = _config(args)
    t = cfg.template_size
    files = _frame_files(args.frames)
    res = {r.frame_index: r for r in read_results(args.results)}
    quad = _init_quad(args)
    h_in = geo.normalization_homography(quad, (t, t))
    overlay = resize(read_image(args.overlay), (t, t))
    os.makedirs(args.out, exist_ok=True)
    written = 0
    for idx, path in enumerate(files):
        frame = read_image(path)
        r = res.get(idx)
        if r is not None and not r.lost:
            vis = None
            vpath = os.path.join(args.vis_dir, f"{idx:06d}_vis.png") if args.vis_dir else None
            if vpath and os.path.exists(vpath):
                vis = read_mask(vpath)
            frame = composite(frame, overlay, r.h_ij, vis, h_in)
        write_image(os.path.join(args.out, f"{idx:06d}.png"), frame)
        written += 1
    print(f"wrote {written} composited frames to {args.out}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hvtrack", description="planar object tracking with visibility")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic training set")
    g.add_argument("--corpus", default="builtin", help="image directory, or 'builtin'")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", parents=[common], help="train features+head, then confidence")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--corpus", default="builtin", help="images for the confidence phase")
    tr.add_argument("--limit", type=int, help="use at most this many training pairs")
    tr.add_argument("--max-seconds", type=float)
    tr.set_defaults(func=cmd_train)

    tk = sub.add_parser("track", parents=[common], help="track a planar object through frames")
    tk.add_argument("--frames", required=True)
    tk.add_argument("--init", help="x1 y1 x2 y2 x3 y3 x4 y4 in the first frame")
    tk.add_argument("--annotations", help="take the initial quad from this annotation file")
    tk.add_argument("--weights")
    tk.add_argument("--head", choices=("analytic", "learned"))
    tk.add_argument("--out", required=True)
    tk.add_argument("--vis-dir")
    tk.set_defaults(func=cmd_track)

    ev = sub.add_parser("eval", parents=[common], help="AE/HD metrics and curves")
    ev.add_argument("--results", required=True)
    ev.add_argument("--annotations", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--max-threshold", type=float, default=50.0)
    ev.add_argument("--ae-mode", choices=("rms", "mean"), default="rms")
    ev.add_argument("--hd-mode", choices=("mean", "rms"), default="mean")
    ev.set_defaults(func=cmd_eval)

    cp = sub.add_parser("composite", parents=[common], help="paste an overlay onto tracked frames")
    cp.add_argument("--frames", required=True)
    cp.add_argument("--results", required=True)
    cp.add_argument("--overlay", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--init")
    cp.add_argument("--annotations")
    cp.add_argument("--vis-dir")
    cp.set_defaults(func=cmd_composite)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (TrackingError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
