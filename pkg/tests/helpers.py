"""Tiny end-to-end fixtures shared by trainer and acceptance tests."""

import torch

from mkdseg.core import AugConfig, TrainConfig
from mkdseg.data import BatchSampler, SyntheticSceneConfig, generate_synthetic, make_partition
from mkdseg.model import ArchConfig, init_model
from mkdseg.rng import RngStreams
from mkdseg.trainer import init_state

ARCH = ArchConfig(widths=(4, 6, 8), feature_dim=5, num_classes=3)


def tiny_cfg(**kw) -> TrainConfig:
    base = dict(iters_max=20, crop=(16, 16), batch_labeled=2, batch_unlabeled=3, num_classes=3,
                lr0=0.05, lambda0=1.0, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_dataset(seed=3, count=12, n=4):
    cfg = SyntheticSceneConfig(height=16, width=16, num_classes=3, shapes_per_image=(1, 2),
                               size_range=(0.3, 0.6), seed=seed)
    return make_partition(generate_synthetic(cfg, count), n, 0)


def tiny_setup(cfg: TrainConfig, dtype=torch.float64, dataset=None):
    rngs = RngStreams(cfg.seed)
    students = [init_model(ARCH, rngs["init-s1"], dtype), init_model(ARCH, rngs["init-s2"], dtype)]
    state = init_state(students, cfg, ARCH.feature_dim)
    sampler = BatchSampler(dataset or tiny_dataset(), cfg.batch_labeled, cfg.batch_unlabeled, dtype)
    return state, rngs, sampler


def snapshot(model):
    return {k: v.clone() for k, v in model.state_dict().items()}
