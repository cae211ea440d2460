"""Track a synthetic sequence with a transient full occlusion and write the
frames, results, metrics and an overlay composite under one directory.

    python scripts/demo.py --out demo_out
"""

import argparse
import os

import numpy as np

from hvtrack import geometry as geo
from hvtrack.cli import main as cli
from hvtrack.imaging import write_image
from hvtrack.synthbench import builtin_corpus, make_sequence, write_sequence


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo_out")
    ap.add_argument("--weights", help="optional weight file (features, head and/or confidence)")
    args = ap.parse_args()
    corpus = dict(builtin_corpus())
    motions = []
    for j in range(20):
        a = 0.02 * j
        rot = np.array([[np.cos(a), -np.sin(a), 0.0], [np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])
        motions.append(geo.compose(geo.translation(2.0 * j, 1.0 * j), rot))
    seq = make_sequence(corpus["astronaut"], motions, occluded=(8, 9))
    frames, ann = write_sequence(os.path.join(args.out, "sequence"), seq)
    write_image(os.path.join(args.out, "overlay.png"), corpus["coffee"])
    extra = ["--weights", args.weights] if args.weights else []
    res = os.path.join(args.out, "results.txt")
    vis = os.path.join(args.out, "vis")
    cli(["track", "--frames", frames, "--annotations", ann, "--out", res, "--vis-dir", vis] + extra)
    cli(["eval", "--results", res, "--annotations", ann, "--out", os.path.join(args.out, "eval")])
    cli(["composite", "--frames", frames, "--results", res, "--overlay", os.path.join(args.out, "overlay.png"),
         "--annotations", ann, "--vis-dir", vis, "--out", os.path.join(args.out, "composite")])


if __name__ == "__main__":
    main()
