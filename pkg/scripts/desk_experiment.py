"""Run the desk-scale comparison of MKD, co-training (alpha=0) and supervised-only training.

Example:
    python scripts/desk_experiment.py --out runs/desk
    python scripts/desk_experiment.py --seeds 0 --iters 300 --train-override rampup_iters=200
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import torch
import yaml

from mkdseg.config import _build
from mkdseg.data import SyntheticSceneConfig
from mkdseg.desk import DeskSpec, run_desk_experiment, summary_json


def _overrides(pairs):
    out = {}
    for pair in pairs or []:
        key, _, value = pair.partition("=")
        out[key] = yaml.safe_load(value)
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--iters", type=int, help="override iters_max")
    parser.add_argument("--scene", help="YAML file with SyntheticSceneConfig fields")
    parser.add_argument("--train-override", nargs="*", metavar="KEY=VALUE",
                        help="TrainConfig fields applied to every arm")
    parser.add_argument("--out", help="keep run directories here (default: temporary)")
    parser.add_argument("--summary", help="write the JSON summary to this path")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    spec = DeskSpec(seeds=tuple(args.seeds))
    if args.scene:
        scene = _build(SyntheticSceneConfig, yaml.safe_load(Path(args.scene).read_text()) or {}, "")
        spec = dataclasses.replace(spec, scene=scene)
    changes = _overrides(args.train_override)
    if args.iters:
        changes["iters_max"] = args.iters
    if changes:
        spec = dataclasses.replace(spec, train=spec.train.replace(**changes))

    results = run_desk_experiment(spec, out_dir=args.out)
    text = summary_json(results)
    print(text)
    if args.summary:
        Path(args.summary).write_text(text + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
