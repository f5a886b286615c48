"""Overfit the default network on one default 64^3 phantom, for each requested seed.

    python3 scripts/overfit.py --seeds 0 1 2 [--out results/overfit.json]
"""
import argparse
import json
import logging

from uafuse.experiments import run_overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    results = []
    for seed in args.seeds:
        res = run_overfit(seed)
        results.append(res)
        print(f"seed {seed}: mean Dice {res['mean_dice']:.4f} per class {[round(d, 4) for d in res['dice']]} "
              f"streams {res['stream_dice']} in {res['seconds'] / 60:.1f} min", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
