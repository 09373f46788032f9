"""Order-head subsets and mask-ratio sweep at full desk-scale epochs.

    python3 demos/ablations.py --out runs/ablations --seed 0
"""
import argparse
import logging

from voxinit import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--s1-epochs", type=int, default=50)
    ap.add_argument("--s2-epochs", type=int, default=150)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    kw = dict(seed=args.seed, s1_epochs=args.s1_epochs, s2_epochs=args.s2_epochs)
    for r in experiments.head_subset_ablation(f"{args.out}/heads", **kw):
        print(f"heads {r.heads_used:8s} mean Dice {r.mean_dice:6.2f}")
    for r in experiments.mask_ratio_sweep(f"{args.out}/masks", **kw):
        print(f"mask ratio {r.mask_ratio:.1f}  mean Dice {r.mean_dice:6.2f}")


if __name__ == "__main__":
    main()
