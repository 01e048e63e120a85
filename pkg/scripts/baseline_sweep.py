"""WMMSE, random and max-power sum rates on held-out channel draws, no training.

    python3 scripts/baseline_sweep.py --users 2,3,4,5 --seeds 0,1,2
"""
import argparse
import csv
from pathlib import Path

from fetrpo import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/baseline_sweep")
    ap.add_argument("--users", default="2,3,4,5")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "baselines.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "seed", "draws", "wmmse", "random", "max_power"])
        for K in (int(k) for k in args.users.split(",")):
            cfg = harness.build_config(overrides=[*args.set, f"K={K}"], seeds=seeds, output_dir=str(out))
            for s in seeds:
                rep = harness.baseline_sweep(cfg, s, out / f"draws_K{K}_seed{s}.csv")
                w.writerow([K, s, rep.draws, repr(rep.wmmse), repr(rep.random), repr(rep.max_power)])
                print(f"K={K} seed={s}: wmmse {rep.wmmse:.4f} random {rep.random:.4f} max {rep.max_power:.4f}")
    print(f"wrote {out / 'baselines.csv'}")


if __name__ == "__main__":
    main()
