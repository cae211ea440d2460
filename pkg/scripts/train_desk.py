"""Train the desk-scale models used by the ablation: joint (all three losses)
and homography-only (visibility losses switched off).

    python scripts/train_desk.py --out .cache/models
"""

import argparse
import logging
import os

from hvtrack.estimation import LossWeights
from hvtrack.synthbench import builtin_corpus
from hvtrack.train import train_desk_to_file

VARIANTS = {"joint": LossWeights(1.0, 1.0, 1.0), "homography_only": LossWeights(1.0, 0.0, 0.0)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=".cache/models")
    ap.add_argument("--variant", choices=sorted(VARIANTS), action="append")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    os.makedirs(args.out, exist_ok=True)
    corpus = builtin_corpus()
    for name in args.variant or sorted(VARIANTS):
        meta = train_desk_to_file(os.path.join(args.out, name + ".hvcw"), corpus, weights=VARIANTS[name])
        print(f"{name}: {meta['seconds']:.0f} s, final loss {meta['history'][-1][0]:.4f}")


if __name__ == "__main__":
    main()
