"""Learned initialization vs unetr-default at equal epoch budgets.

    python3 demos/compare_init.py --out runs/compare --seeds 0 1 2
"""
import argparse
import logging

from voxinit import experiments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--s1-epochs", type=int, default=50)
    ap.add_argument("--s2-epochs", type=int, default=150)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    res = experiments.compare_initializations(args.out, args.seeds, s1_epochs=args.s1_epochs,
                                              s2_epochs=args.s2_epochs,
                                              baseline_epochs=args.s1_epochs + args.s2_epochs)
    for r in res.rows:
        print(f"seed {r.seed}  {r.arm:8s} {r.s1_epochs:4d}+{r.s2_epochs:<4d} mean Dice {r.mean_dice:6.2f}")
    print(f"learned {res.mean('learned'):.2f}  default {res.mean('default'):.2f}  margin {res.margin:+.2f}")


if __name__ == "__main__":
    main()
