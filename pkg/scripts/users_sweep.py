"""Evaluation sum rate of trained policies and baselines as the number of users grows.

    python3 scripts/users_sweep.py --users 2,3,4,5 --seeds 0,1,2 --out runs/users
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from fetrpo import harness


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="runs/users_sweep")
    ap.add_argument("--users", default="2,3,4,5")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--memory", type=int, default=8, help="M for the trained policy")
    ap.add_argument("--long-run", action="store_true")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for K in (int(k) for k in args.users.split(",")):
        cfg = harness.build_config(overrides=[*args.set, f"K={K}", f"M={args.memory}"],
                                   long_run=args.long_run, seeds=seeds, output_dir=str(out / f"K{K}"))
        res = harness.run_experiment(cfg)
        evals = [run.evaluation for run in res["runs"]]
        row = {"K": K}
        for key in ("policy", "wmmse", "random", "max_power"):
            row[key] = float(np.mean([getattr(e, key) for e in evals]))
        row["policy_over_wmmse"] = row["policy"] / row["wmmse"]
        rows.append(row)
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    with open(out / "users.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows({k: repr(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows)
    print(f"wrote {out / 'users.csv'}")


if __name__ == "__main__":
    main()
