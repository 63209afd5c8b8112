"""Command-line entry points: train, eval, sweep, preset, report.

Seeds come only from configs and flags; there is deliberately no environment
variable override.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .config import PRESET_NAMES, SCENARIOS, ablation_presets, load_config, save_config
from .harness import evaluate, generalization_sweep, train


def _parse_int_list(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_train(args):
    cfg = load_config(args.config)
    seeds = _parse_int_list(args.seeds) if args.seeds else [args.seed if args.seed
                                                            is not None else cfg.seed]
    for seed in seeds:
        run_cfg = dataclasses.replace(cfg, seed=seed)
        out_dir = args.out if len(seeds) == 1 else os.path.join(
            args.out, f"{run_cfg.scenario}-{run_cfg.variant}-seed{seed}")
        final = train(run_cfg, out_dir, resume_from=args.resume,
                      full_state_final=args.full_state,
                      log=lambda msg, s=seed: print(f"[seed {s}] {msg}", flush=True))
        print(f"[seed {seed}] final checkpoint: {final}", flush=True)


def cmd_eval(args):
    result = evaluate(args.checkpoint, games=args.games, eval_seed=args.seed)
    payload = json.dumps(result.to_dict(), sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(payload + "\n")
    print(payload)


def cmd_sweep(args):
    rows = generalization_sweep(args.checkpoint, _parse_int_list(args.loads),
                                games=args.games, eval_seed=args.seed)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            header = list(rows[0].keys())
            f.write(",".join(header) + "\n")
            for row in rows:
                f.write(",".join(repr(row[k]) if isinstance(row[k], float)
                                 else str(row[k]) for k in header) + "\n")
    for row in rows:
        print(json.dumps(row, sort_keys=True))


def cmd_preset(args):
    cfg = ablation_presets(args.name, scenario=args.scenario, scale=args.scale,
                           seed=args.seed)
    save_config(args.emit, cfg)
    print(f"wrote {args.emit}")


def cmd_report(args):
    from .report import render_reports

    runs = []
    for entry in args.runs:
        runs.extend(entry.split(","))
    written = render_reports(runs, args.out, window=args.window)
    for path in written:
        print(path)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcrl",
                                description="graph-convolutional multi-agent "
                                            "Q-learning: training and baselines")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="override config seed")
    t.add_argument("--seeds", default=None,
                   help="comma-separated seed list; runs go to per-seed subdirs")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", default=None, help="full-state checkpoint to resume")
    t.add_argument("--full-state", action="store_true",
                   help="embed the replay buffer in the final checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--games", type=int, default=None)
    e.add_argument("--seed", type=int, default=1000)
    e.add_argument("--out", default=None, help="write the result JSON here")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="apply a routing checkpoint at other loads, "
                                     "paired with Floyd-BL")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--loads", required=True, help="e.g. 20,40,60")
    s.add_argument("--games", type=int, default=10)
    s.add_argument("--seed", type=int, default=2000)
    s.add_argument("--out", default=None, help="write a CSV here")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("preset", help="emit a fully populated config file")
    r.add_argument("--name", required=True, choices=PRESET_NAMES)
    r.add_argument("--scenario", default="battle", choices=SCENARIOS)
    r.add_argument("--scale", default="desk", choices=("desk", "paper"))
    r.add_argument("--seed", type=int, default=1)
    r.add_argument("--emit", required=True)
    r.set_defaults(func=cmd_preset)

    g = sub.add_parser("report", help="render learning-curve figures and "
                                      "smoothed CSVs from run directories")
    g.add_argument("--runs", nargs="+", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--window", type=int, default=20)
    g.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
