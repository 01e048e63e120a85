"""Convergence curves for several memory sizes and decay exponents.

Trains every (M, z) setting on the same seeds and writes one averaged CSV
per setting plus a summary of iterations-to-target against the M = 0 run.

    python3 scripts/memory_sweep.py --out runs/memory --seeds 0,1,2
    python3 scripts/memory_sweep.py --long-run --seeds 0,1,2,3,4,5
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from fetrpo import harness

SETTINGS = [(0, 1.0), (4, 1.0), (4, 3.0), (8, 1.0), (8, 3.0)]


def first_hit(curve, target):
    hits = np.nonzero(np.asarray(curve) >= target)[0]
    return int(hits[0]) + 1 if hits.size else len(curve) + 1


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/memory_sweep")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--long-run", action="store_true")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--target-frac", type=float, default=0.9)
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    curves = {}
    for M, z in SETTINGS:
        name = f"M{M}_z{z:g}"
        cfg = harness.build_config(overrides=[*args.set, f"M={M}", f"z={z}"], long_run=args.long_run,
                                   seeds=seeds, output_dir=str(Path(args.out) / name))
        res = harness.run_experiment(cfg, name=name)
        curves[(M, z)] = [[r["mean_return"] for r in run.metrics] for run in res["runs"]]
        print(f"{name}: final averaged return {res['averaged'][-1]['mean_return']:.2f} -> {res['path']}")

    target = args.target_frac * float(np.mean([c[-1] for c in curves[(0, 1.0)]]))
    summary = Path(args.out) / "summary.csv"
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["M", "z", "target", "median_first_hit", *[f"first_hit_seed{s}" for s in seeds]])
        for (M, z), seed_curves in curves.items():
            hits = [first_hit(c, target) for c in seed_curves]
            w.writerow([M, z, repr(target), float(np.median(hits)), *hits])
            print(f"M={M} z={z:g}: iterations to {args.target_frac:.0%} of M=0 final: {hits}")
    print(f"wrote {summary}")


if __name__ == "__main__":
    main()
