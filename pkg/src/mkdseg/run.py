"""End-to-end training runs: state construction, checkpoints, logging, evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch

from .config import BRANCHES, RunConfig, config_from_dict, config_hash, config_to_dict, save_config
from .data import (
    BatchSampler,
    SegDataset,
    apply_manifest,
    load_dataset_dir,
    make_partition,
    read_manifest,
    write_manifest,
)
from .feature_aug import ClassFeatureStatistics
from .metrics import ConfusionMatrix, accumulate, format_report, report_record
from .model import SegNet, init_model, predict
from .rng import RngStreams
from .trainer import MKDState, NonFiniteLossError, StepReport, init_state, train_step

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


def build_state(cfg: RunConfig, rngs: RngStreams) -> MKDState:
    dtype = DTYPES[cfg.precision]
    students = [init_model(cfg.arch, rngs["init-s1"], dtype),
                init_model(cfg.arch, rngs["init-s2"], dtype)]
    return init_state(students, cfg.train, cfg.arch.feature_dim)


def select_network(state: MKDState, branch: str) -> SegNet:
    if branch not in BRANCHES:
        raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
    b = state.branches[int(branch[-1]) - 1]
    return b.student if branch.startswith("student") else b.teacher


# --- checkpoints --------------------------------------------------------------------


def save_checkpoint(path, cfg: RunConfig, state: MKDState, rngs: RngStreams) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(cfg),
        "config": config_to_dict(cfg),
        "step": state.step,
        "branches": [b.state_dict() for b in state.branches],
        "stats": state.stats.state_dict(),
        "rng": rngs.state_dict(),
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[RunConfig, MKDState, RngStreams]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version}")
    cfg = config_from_dict(payload["config"])
    if payload["config_hash"] != config_hash(cfg):
        raise ValueError(f"{path}: config hash mismatch")
    rngs = RngStreams(cfg.train.seed)
    state = build_state(cfg, rngs)
    for b, s in zip(state.branches, payload["branches"]):
        b.load_state_dict(s)
    state.stats = ClassFeatureStatistics.from_state_dict(payload["stats"])
    state.step = payload["step"]
    rngs.load_state_dict(payload["rng"])
    return cfg, state, rngs


# --- evaluation -------------------------------------------------------------------


def evaluate(model: SegNet, dataset: SegDataset, batch_size: int = 16) -> ConfusionMatrix:
    """Single-scale evaluation over every labeled item of ``dataset``."""
    dtype = next(model.parameters()).dtype
    cm = ConfusionMatrix.zeros(dataset.num_classes)
    idx = [i for i, lab in enumerate(dataset.labels) if lab is not None]
    by_size: dict = {}
    for i in idx:
        by_size.setdefault(dataset.images[i].shape, []).append(i)
    for group in by_size.values():
        for start in range(0, len(group), batch_size):
            chunk = group[start:start + batch_size]
            x = torch.stack([dataset.image_tensor(i, dtype) for i in chunk])
            y = torch.stack([dataset.label_tensor(i) for i in chunk])
            cm = accumulate(cm, predict(model, x), y)
    return cm


# --- training loop ---------------------------------------------------------------------


def prepare_dataset(cfg: RunConfig) -> SegDataset:
    ds = load_dataset_dir(cfg.data.train_dir, cfg.train.num_classes)
    if cfg.data.manifest:
        return apply_manifest(ds, read_manifest(cfg.data.manifest))
    return make_partition(ds, cfg.data.denominator, cfg.data.split_seed)


@dataclass
class RunResult:
    state: MKDState
    reports: list[StepReport]
    final_eval: Optional[ConfusionMatrix]


def train(cfg: RunConfig, resume: Optional[str] = None, dataset: Optional[SegDataset] = None,
          val: Optional[SegDataset] = None) -> RunResult:
    """Run (or resume) the full loop, writing logs and checkpoints under ``cfg.out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = DTYPES[cfg.precision]
    if dataset is None:
        dataset = prepare_dataset(cfg)
    if val is None and cfg.data.val_dir:
        val = load_dataset_dir(cfg.data.val_dir, cfg.train.num_classes)

    if resume:
        ckpt_cfg, state, rngs = load_checkpoint(resume)
        if config_hash(ckpt_cfg) != config_hash(cfg):
            raise ValueError("checkpoint was written by a different train/arch config")
    else:
        rngs = RngStreams(cfg.train.seed)
        state = build_state(cfg, rngs)
        save_config(cfg, out / "config.yaml")
        write_manifest(dataset, out / "manifest.tsv")
        if cfg.checkpoint_every:
            save_checkpoint(out / f"ckpt_{0:06d}.pt", cfg, state, rngs)

    sampler = BatchSampler(dataset, cfg.train.batch_labeled, cfg.train.batch_unlabeled, dtype)
    reports = []
    with open(out / "train_log.jsonl", "a" if resume else "w") as logf:
        while state.step < cfg.train.iters_max:
            batch = sampler.sample(rngs["sampler"])
            try:
                report = train_step(state, batch, cfg.train, rngs)
            except NonFiniteLossError as exc:
                logf.write(exc.report.to_json() + "\n")
                save_checkpoint(out / "ckpt_failed.pt", cfg, state, rngs)
                raise
            reports.append(report)
            logf.write(report.to_json() + "\n")
            logf.flush()
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{state.step:06d}.pt", cfg, state, rngs)
            if val is not None and cfg.eval_every and state.step % cfg.eval_every == 0 \
                    and state.step < cfg.train.iters_max:
                cm = evaluate(select_network(state, cfg.eval_branch), val)
                logf.write(report_record(cm, step=state.step, branch=cfg.eval_branch) + "\n")
        save_checkpoint(out / "ckpt_last.pt", cfg, state, rngs)
        final = None
        if val is not None:
            final = evaluate(select_network(state, cfg.eval_branch), val)
            logf.write(report_record(final, step=state.step, branch=cfg.eval_branch) + "\n")
            (out / "eval_report.txt").write_text(format_report(final) + "\n")
    return RunResult(state, reports, final)
