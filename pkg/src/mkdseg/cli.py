"""Command-line entry points: train, eval, synth, split, plot.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import BRANCHES, _build, load_config
from .core import IGNORE, ConfigError, ValidationError
from .data import (
    SyntheticSceneConfig,
    generate_synthetic,
    load_dataset_dir,
    make_partition,
    save_folder_dataset,
    write_manifest,
)
from .metrics import format_report
from .run import evaluate, load_checkpoint, select_network, train
from .trainer import NonFiniteLossError

log = logging.getLogger("mkdseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, yaml.YAMLError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for name in ("train_dir", "val_dir", "manifest"):
        p = getattr(cfg.data, name)
        if p and not Path(p).exists():
            print(f"config error: data.{name}: {p} does not exist", file=sys.stderr)
            return EXIT_USAGE
    if args.resume and not Path(args.resume).exists():
        print(f"resume checkpoint {args.resume} not found", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = train(cfg, resume=args.resume)
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, ValidationError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    log.info("finished %d steps", result.state.step)
    if result.final_eval is not None:
        print(format_report(result.final_eval))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).exists():
        print(f"checkpoint {args.checkpoint} not found", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        cfg, state, _ = load_checkpoint(args.checkpoint)
        dataset = load_dataset_dir(args.data, cfg.train.num_classes)
        cm = evaluate(select_network(state, args.branch), dataset)
    except (OSError, ValueError) as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(format_report(cm))
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        data = yaml.safe_load(Path(args.config).read_text()) or {}
        cfg = _build(SyntheticSceneConfig, data, "")
    except (ConfigError, yaml.YAMLError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.count < 1:
        print("--count must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    save_folder_dataset(generate_synthetic(cfg, args.count), args.out)
    return EXIT_OK


def cmd_split(args) -> int:
    try:
        ds = load_dataset_dir(args.data, IGNORE)
        part = make_partition(ds, args.denominator, args.seed)
    except (OSError, ValueError) as exc:
        print(f"split failed: {exc}", file=sys.stderr)
        return EXIT_USAGE
    write_manifest(part, args.out)
    return EXIT_OK


def read_log(path) -> tuple[list[dict], list[dict], int]:
    steps, evals, bad = [], [], 0
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec["type"]
            if kind == "step":
                float(rec["total"]), int(rec["step"])
                steps.append(rec)
            elif kind == "eval":
                float(rec["miou"]), int(rec["step"])
                evals.append(rec)
            else:
                bad += 1
        except (ValueError, KeyError, TypeError):
            bad += 1
    return steps, evals, bad


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        steps, evals, bad = read_log(args.log)
    except OSError as exc:
        print(f"cannot read log: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if bad:
        print(f"warning: skipped {bad} malformed log line(s)", file=sys.stderr)
    n_axes = 2 if evals else 1
    fig, axes = plt.subplots(1, n_axes, figsize=(6 * n_axes, 4), squeeze=False)
    ax = axes[0][0]
    xs = [r["step"] for r in steps]
    for key in ("total", "sup", "st", "ss"):
        ax.plot(xs, [r[key] for r in steps], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    if evals:
        ax = axes[0][1]
        ax.plot([r["step"] for r in evals], [r["miou"] for r in evals], marker="o")
        ax.set_xlabel("step")
        ax.set_ylabel("mIoU")
    fig.tight_layout()
    fig.savefig(args.out)
    plt.close(fig)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mkdseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one network of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory with images/ and labels/")
    p.add_argument("--branch", choices=BRANCHES, default="student1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a labeled/unlabeled manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--denominator", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("plot", help="plot loss and mIoU curves from a training log")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
