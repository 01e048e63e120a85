"""Command-line entry point: ``python -m fetrpo {train,evaluate,baseline,selftest}``."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from fetrpo import harness
from fetrpo.harness import CheckpointError, ConfigError


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated integer list, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("seeds must be non-empty")
    return seeds


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"fetrpo: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:22s} {v}" for k, v in harness.config_keys().items())
    parser = _Parser(prog="fetrpo", formatter_class=argparse.RawDescriptionHelpFormatter,
                     description="Faded-experience TRPO for interference-channel power control.",
                     epilog="config keys (file lines `key = value`, or --set key=value):\n" + keys)
    parser.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seeds", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--out", help="output directory")
        p.add_argument("--long-run", action="store_true", help="full-scale preset L=1300, N=10000, T=500")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("train", help="train every seed; write per-seed and averaged CSVs")
    common(p)
    p.add_argument("--name", default="averaged", help="stem of the averaged CSV")
    p.add_argument("--plain-trpo", action="store_true", help="use the memory-free TRPO path (needs M = 0)")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint against the baselines")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")

    p = sub.add_parser("baseline", help="WMMSE / random / max-power sum rates on fresh channel draws")
    common(p)

    p = sub.add_parser("selftest", help="run the finite-difference, GAE and WMMSE oracles")
    p.add_argument("--quick", action="store_true", help="fewer oracle instances")
    return parser


def _config(args) -> harness.ExperimentConfig:
    return harness.build_config(args.config, args.set, args.long_run, args.seeds, args.out)


def cmd_train(args) -> int:
    cfg = _config(args)
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.output_dir) / "config.cfg").write_text(harness.dump_config(cfg))
    t0 = time.perf_counter()
    res = harness.run_experiment(cfg, plain_trpo=args.plain_trpo, name=args.name)
    for run in res["runs"]:
        e = run.evaluation
        print(f"seed {run.seed}: final return {run.metrics[-1]['mean_return']:.2f}  "
              f"eval sum rate {e.policy:.4f} (mean action {e.policy_mean:.4f})  wmmse {e.wmmse:.4f}  random {e.random:.4f}  "
              f"max {e.max_power:.4f}  ratio {e.wmmse_ratio:.4f}")
    print(f"wrote {res['path']} ({time.perf_counter() - t0:.0f}s)")
    return 0


def _print_report(label: str, e: harness.EvalReport) -> None:
    print(f"{label} draws={e.draws} policy={e.policy:.6f} policy_mean_action={e.policy_mean:.6f} wmmse={e.wmmse:.6f} "
          f"random={e.random:.6f} max_power={e.max_power:.6f} policy/wmmse={e.wmmse_ratio:.6f}")


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ckpt = harness.load_checkpoint(args.ckpt)
    if ckpt.policy.arch.in_dim != cfg.env.obs_dim:
        raise ConfigError(f"checkpoint expects {ckpt.policy.arch.in_dim} observations, "
                          f"config gives K={cfg.env.K} with {cfg.env.obs_dim}")
    seeds = args.seeds or [ckpt.seed]
    for seed in seeds:
        _print_report(f"seed {seed}:", harness.evaluate(ckpt.policy, cfg, seed, ckpt.episodes))
    return 0


def cmd_baseline(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        path = out / f"baseline_seed{seed}.csv"
        e = harness.baseline_sweep(cfg, seed, path)
        print(f"seed {seed}: draws={e.draws} wmmse={e.wmmse:.6f} random={e.random:.6f} "
              f"max_power={e.max_power:.6f} -> {path}")
    return 0


def cmd_selftest(args) -> int:
    from fetrpo import selftest
    failures = selftest.run_all(quick=args.quick)
    return 1 if failures else 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "baseline": cmd_baseline, "selftest": cmd_selftest}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, ValueError) as exc:
        print(f"fetrpo {args.command}: error: {exc}", file=sys.stderr)
        return 1
