"""Gated fusion vs ungated fusion vs single streams on the corrupted-modality phantom set.

    python3 scripts/fusion_benefit.py [--seeds 0 1 2] [--out results/fusion.json]
"""
import argparse
import json
import logging

from uafuse.experiments import fusion_criterion, run_fusion_benefit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--out")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    res = run_fusion_benefit(seeds=tuple(args.seeds))
    for row in res["runs"]:
        print(row)
    ok, detail = fusion_criterion(res["median"])
    print(f"median: {detail} -> {'gated fusion holds up' if ok else 'gated fusion does NOT beat the alternatives'}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(res, fh, indent=2)


if __name__ == "__main__":
    main()
