"""Command-line entry point.

Subcommands: train, eval, trace-variance, plot, inspect-data.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import harness


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vcae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    p_train.add_argument("--config", required=True)

    p_eval = sub.add_parser("eval", help="importance-weighted evaluation of a checkpoint")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p_eval.add_argument("--k", type=int, default=None)
    p_eval.add_argument("--out", default=None, help="metrics CSV to append the result to")

    p_trace = sub.add_parser("trace-variance", help="gradient-variance probe over a checkpoint")
    p_trace.add_argument("--config", required=True)
    p_trace.add_argument("--checkpoint", required=True)
    p_trace.add_argument("--out", default=None)

    p_plot = sub.add_parser("plot", help="emit an SVG line chart from metrics files")
    p_plot.add_argument("metrics", nargs="+")
    p_plot.add_argument("--series", required=True)
    p_plot.add_argument("--out", required=True)
    p_plot.add_argument("--log-y", action="store_true")
    p_plot.add_argument("--title", default="")

    p_inspect = sub.add_parser("inspect-data", help="summarize the dataset a config resolves to")
    p_inspect.add_argument("--config", required=True)

    args = parser.parse_args(argv)

    if args.command == "train":
        config = harness.load_config(args.config)
        paths = harness.run_training(config)
        print(f"checkpoint: {paths.checkpoint}")
        print(f"metrics:    {paths.metrics}")
    elif args.command == "eval":
        config = harness.load_config(args.config)
        harness.run_eval(
            args.checkpoint, config, split=args.split, k=args.k, metrics_path=args.out
        )
    elif args.command == "trace-variance":
        config = harness.load_config(args.config)
        harness.run_trace(args.checkpoint, config, out_path=args.out)
    elif args.command == "plot":
        harness.emit_plot(
            args.metrics, args.series, args.out, log_y=args.log_y, title=args.title
        )
        print(f"wrote {args.out}")
    elif args.command == "inspect-data":
        config = harness.load_config(args.config)
        splits = harness.load_splits(config)
        for name in ("train", "valid", "test"):
            ds = splits[name]
            print(
                f"{name}: {len(ds)} images of dim {ds.images.shape[1]}, "
                f"mean bit {ds.images.mean():.4f}, binarization {ds.binarization.describe()}"
            )
    return 0


if __name__ == "__main__":
    sys.exit(main())
