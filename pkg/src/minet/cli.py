"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, gradcheck, export-figures.
Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

import argparse
import os
import sys

import numpy as np

from . import data, gradcheck, model, serialization, train as train_mod
from .train import TrainConfig


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write("error: %s\n" % message)
        raise SystemExit(1)


def _build_parser():
    parser = _Parser(prog="minet",
                     description="Multi-contrast super-resolution toolkit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", parents=[], help="generate a phantom dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=int, default=64, help="high-resolution side")
    p.add_argument("--scale", type=int, default=2, choices=(2, 4))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default="kspace_truncation",
                   choices=data.DEGRADE_METHODS)
    p.add_argument("--bias-amplitude", type=float, default=0.08)

    def add_train_flags(q):
        q.add_argument("--config", help="key=value config file")
        q.add_argument("--dataset", help="dataset root (overrides config)")
        q.add_argument("--out", help="output root (default MINET_RUN_ROOT or ./runs)")
        q.add_argument("--epochs", type=int)
        q.add_argument("--batch-size", type=int)
        q.add_argument("--lr", type=float)
        q.add_argument("--seed", type=int)
        q.add_argument("--scale", type=int, choices=(2, 4))
        q.add_argument("--groups", type=int, help="residual groups per branch")
        q.add_argument("--channels", type=int)
        q.add_argument("--blocks", type=int, help="residual blocks per group")
        q.add_argument("--alpha", type=float)
        q.add_argument("--beta", type=float)
        q.add_argument("--quiet", action="store_true")

    p = sub.add_parser("train", help="train one variant")
    add_train_flags(p)
    p.add_argument("--variant", default=None, choices=model.VARIANTS)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--dataset", help="override the dataset root")

    p = sub.add_parser("ablate", help="train and compare all variants")
    add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", help="run a single named check")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("export-figures",
                       help="PGM panels and error maps for a finished run")
    p.add_argument("--run", required=True)
    p.add_argument("--count", type=int, default=3)

    return parser


def _config_from_args(args):
    base = {}
    if args.config:
        base = serialization.load_config(args.config)
    config = TrainConfig.from_dict(base)
    overrides = {
        "dataset_root": args.dataset,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
        "r": args.scale,
        "L": args.groups,
        "C": args.channels,
        "B": args.blocks,
        "alpha": args.alpha,
        "beta": args.beta,
    }
    if getattr(args, "variant", None) is not None:
        overrides["variant"] = args.variant
    for key, value in overrides.items():
        if value is not None:
            setattr(config, key, value)
    return config


def _cmd_gen_data(args):
    split = data.build_dataset(args.out, args.count, size=args.size,
                               r=args.scale, seed=args.seed,
                               method=args.method,
                               bias_amplitude=args.bias_amplitude)
    serialization.save_config(os.path.join(args.out, "manifest.txt"), {
        "command": "gen-data", "count": args.count, "size": args.size,
        "scale": args.scale, "seed": args.seed, "method": args.method,
        "bias_amplitude": args.bias_amplitude, "version": 1,
    })
    print("wrote %d/%d/%d train/val/test samples under %s"
          % (len(split.train), len(split.val), len(split.test), args.out))
    return 0


def _cmd_train(args):
    config = _config_from_args(args)
    run_dir, history = train_mod.train_and_evaluate(
        config, args.out, verbose=not args.quiet)
    print("run dir: %s" % run_dir)
    print("best epoch %d, val psnr %.4f dB"
          % (history["best_epoch"], history["best_val_psnr"]))
    print(history["model_report"].format_row("model"))
    print(history["bicubic_report"].format_row("bicubic"))
    return 0


def _cmd_eval(args):
    run_dir = os.path.dirname(os.path.abspath(args.checkpoint))
    config = TrainConfig.from_dict(
        serialization.load_config(os.path.join(run_dir, "config.txt")))
    if args.dataset:
        config.dataset_root = args.dataset
    model_report, bicubic_report = train_mod.evaluate_checkpoint(
        args.checkpoint, config, args.split)
    print(model_report.format_row("model"))
    print(bicubic_report.format_row("bicubic"))
    return 0


def _cmd_ablate(args):
    config = _config_from_args(args)
    out_root = args.out or os.environ.get("MINET_RUN_ROOT", "runs")
    rows, table = train_mod.run_ablation(config, out_root,
                                         verbose=not args.quiet)
    print(table, end="")
    return 0


def _cmd_gradcheck(args):
    try:
        results = gradcheck.run_suite(seed=args.seed, only=args.module)
    except KeyError as exc:
        sys.stderr.write("%s\n" % exc.args[0])
        return 1
    failed = False
    for name, (err, tol) in results.items():
        status = "ok" if err < tol else "FAIL"
        print("%-28s max rel err %.3e  (tol %.0e)  %s" % (name, err, tol, status))
        failed = failed or err >= tol
    return 2 if failed else 0


def _cmd_export_figures(args):
    written = train_mod.export_figures(args.run, args.count)
    for path in written:
        print(path)
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "export-figures": _cmd_export_figures,
}


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](args)
    except (RuntimeError, FloatingPointError) as exc:
        sys.stderr.write("numerical failure: %s\n" % exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
