"""Command-line entry points: `topkast train` and `topkast eval`.

Flags override config-file values; the TOPKAST_OUT_DIR environment
variable overrides the file's out_dir but loses to an explicit --out-dir.
"""

from __future__ import annotations

import argparse
import sys

from .experiment import (
    ConfigError,
    TrainingDiverged,
    evaluate_checkpoint,
    parse_config,
    run_experiment,
)

# (flag, config key) pairs for train overrides; values pass through as the
# raw strings the config parser expects.
TRAIN_OVERRIDES = (
    ("--seed", "seed"),
    ("--steps", "steps"),
    ("--method", "method"),
    ("--fwd-sparsity", "fwd_sparsity"),
    ("--bwd-sparsity", "bwd_sparsity"),
    ("--out-dir", "out_dir"),
    ("--resume", "resume"),
)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="topkast",
        description="Always-sparse training with top-k magnitude masks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run a training experiment")
    train.add_argument("--config", required=True, help="flat key=value config file")
    for flag, key in TRAIN_OVERRIDES:
        train.add_argument(flag, dest=key, default=None)

    ev = sub.add_parser("eval", help="score a checkpoint on the test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "train":
            overrides = {
                key: getattr(args, key)
                for _, key in TRAIN_OVERRIDES
                if getattr(args, key) is not None
            }
            config = parse_config(args.config, overrides)
            summary = run_experiment(config)
            final = summary.get("final") or {}
            print(
                f"done: method={summary['method']} seed={summary['seed']} "
                f"steps={summary['steps']} "
                f"eval_loss={final.get('eval_loss')} "
                f"eval_accuracy={final.get('eval_accuracy')}"
            )
        else:
            config = parse_config(args.config)
            result = evaluate_checkpoint(config, args.checkpoint)
            print(
                f"step={result['step']} eval_loss={result['eval_loss']} "
                f"eval_accuracy={result['eval_accuracy']}"
            )
        return 0
    except (ConfigError, TrainingDiverged, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
