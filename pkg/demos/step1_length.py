"""Downstream Dice after a short and a long self-supervised step.

Step 2 gets the same number of epochs in both arms, so only the length of
step 1 changes. Takes roughly 20 minutes on one core with the defaults.

    python3 demos/step1_length.py --short 25 --long 200 --s2-epochs 150
"""
import argparse
import logging
from pathlib import Path

import numpy as np

from voxinit import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/step1_length")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--short", type=int, default=25)
    ap.add_argument("--long", type=int, default=200)
    ap.add_argument("--s2-epochs", type=int, default=150)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    setup = experiments.DeskSetup()
    rows = []
    for seed in args.seeds:
        data = setup.dataset(seed)
        for n in (args.short, args.long):
            rows.append(experiments.run_arm(setup, seed, f"s1_{n}", n, args.s2_epochs, args.out, data=data))
    experiments.write_summary(Path(args.out) / "step1_length.csv", rows)
    for n in (args.short, args.long):
        scores = [r.mean_dice for r in rows if r.s1_epochs == n]
        print(f"step 1 for {n:4d} epochs: mean Dice {np.mean(scores):6.2f}  per seed {np.round(scores, 2).tolist()}")


if __name__ == "__main__":
    main()
