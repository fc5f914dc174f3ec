"""Toy-scale ablations: branch count and decoder type over several seeds.

    python3 scripts/ablation.py --seeds 0 1 2 --epochs 30
"""
import argparse
import time

import numpy as np

from fpenet.config import ModelConfig
from fpenet.experiments import ABLATIONS, run_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--images", type=int, default=200)
    ap.add_argument("--only", nargs="*", default=None, help="subset of ablation names")
    args = ap.parse_args()

    base = ModelConfig(num_classes=3, p=2, q=3, input_size=(64, 64))
    names = args.only or list(ABLATIONS)
    scores = {}
    for name in names:
        cfg = ABLATIONS[name](base)
        for seed in args.seeds:
            t0 = time.time()
            res = run_toy(cfg, seed=seed, epochs=args.epochs, n_images=args.images)
            scores.setdefault(name, []).append(res.val_miou)
            print(f"{name}\tseed={seed}\tmiou={res.val_miou:.4f}\tloss={res.log[-1].loss:.4f}\t{time.time() - t0:.0f}s", flush=True)
    for name, vals in scores.items():
        print(f"{name}\tmean={np.mean(vals):.4f}\t" + " ".join(f"{v:.4f}" for v in vals))


if __name__ == "__main__":
    main()
