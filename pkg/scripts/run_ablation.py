"""Median AE of the ablation variants on a fresh augmented + occluded test split.

    python scripts/run_ablation.py --models .cache/models --pairs 2000
"""

import argparse
import os

import numpy as np

from hvtrack.config import Config
from hvtrack.synthbench import builtin_corpus, generate_samples, metric_ae, pair_from_sample
from hvtrack.train import DeskRecipe, load_model, track_pair, track_pair_variants


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--models", default=".cache/models")
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=606)
    ap.add_argument("--perturbation", type=float, default=None, help="default: the desk recipe's")
    args = ap.parse_args()
    pert = DeskRecipe().perturbation if args.perturbation is None else args.perturbation
    cfg = Config(head="learned", extractor="convnet", perturbation=pert)
    joint = load_model(os.path.join(args.models, "joint.hvcw"), cfg)
    homog = load_model(os.path.join(args.models, "homography_only.hvcw"), cfg)
    err = {"single": [], "pyramid": [], "pyramid+refine": [], "homography-only": []}
    for i, s in enumerate(generate_samples(builtin_corpus(), cfg, args.pairs, seed=args.seed)):
        pair = pair_from_sample(s)
        for k, q in track_pair_variants(joint, cfg, pair).items():
            err[k].append(metric_ae(q, s.quad_ref))
        err["homography-only"].append(metric_ae(track_pair(homog, cfg, pair), s.quad_ref))
        if (i + 1) % 100 == 0:
            print(i + 1, {k: round(float(np.median(v)), 3) for k, v in err.items()}, flush=True)
    for k, v in err.items():
        v = np.array(v)
        print(f"{k:>16}: median AE {np.median(v):.3f}  mean {v.mean():.3f}  AE<5 {np.mean(v < 5):.3f}")


if __name__ == "__main__":
    main()
