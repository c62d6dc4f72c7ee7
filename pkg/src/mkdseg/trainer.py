"""Two students, two EMA teachers, cross supervision.

One call to :func:`train_step` runs the whole update in this order:

1. EMA-update both teachers from their students.
2. Build weak views of the labeled and unlabeled batches and a strong,
   CutMix-mixed view of the unlabeled batch.
3. Teachers predict on the weak unlabeled view; their logits are mixed with
   the same CutMix mask before pseudo-labeling.
4. Students predict on the weak labeled view and the strong unlabeled view;
   unlabeled logits get the implicit feature augmentation.
5. ``total = sup + alpha * st + beta * ss``, with both weights optionally
   scaled by a sigmoid ramp-up.
6. SGD with momentum and poly learning rate on both students.
7. Class feature statistics absorb this step's features.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import torch

from .augmentation import (
    CutMixMask,
    apply_cutmix_images,
    apply_cutmix_logits,
    downsample_nearest,
    partner,
    sample_cutmix_mask,
    strong_augment,
    weak_augment,
)
from .core import IGNORE, TrainConfig, ValidationError
from .feature_aug import (
    AugmentedLogits,
    ClassFeatureStatistics,
    augment_logits,
    isda_loss,
    masked_cross_entropy,
    update_statistics,
)
from .model import SegNet, clone_model, upsample_logits
from .rng import RngStreams


class NonFiniteLossError(RuntimeError):
    def __init__(self, report: "StepReport"):
        super().__init__(f"non-finite loss at step {report.step}: {report.to_json()}")
        self.report = report


# --- branches and EMA ----------------------------------------------------------


def make_optimizer(model: SegNet, cfg: TrainConfig) -> torch.optim.SGD:
    """SGD with weight decay on conv weights only (not biases or norm parameters)."""
    decay = [p for p in model.parameters() if p.ndim > 1]
    no_decay = [p for p in model.parameters() if p.ndim <= 1]
    return torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr0, momentum=cfg.momentum,
    )


@dataclass
class BranchState:
    student: SegNet
    teacher: SegNet
    optimizer: torch.optim.SGD

    @classmethod
    def from_student(cls, student: SegNet, cfg: TrainConfig) -> "BranchState":
        teacher = clone_model(student)
        for p in teacher.parameters():
            p.requires_grad_(False)
        return cls(student, teacher, make_optimizer(student, cfg))

    def state_dict(self) -> dict:
        return {"student": self.student.state_dict(), "teacher": self.teacher.state_dict(),
                "optimizer": self.optimizer.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.student.load_state_dict(state["student"])
        self.teacher.load_state_dict(state["teacher"])
        self.optimizer.load_state_dict(state["optimizer"])


def _ema_tensors(model: SegNet):
    """Parameters and floating-point buffers, in a stable order."""
    named = list(model.named_parameters()) + [
        (n, b) for n, b in model.named_buffers() if b.is_floating_point()
    ]
    return named


@torch.no_grad()
def ema_update(branch: BranchState, gamma: float) -> BranchState:
    """``teacher = gamma * teacher + (1 - gamma) * student`` for weights and BN statistics."""
    if not 0 <= gamma <= 1:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    teacher = dict(_ema_tensors(branch.teacher))
    student = dict(_ema_tensors(branch.student))
    if teacher.keys() != student.keys():
        raise ValidationError("teacher and student have different parameter sets")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValidationError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(gamma).add_(s, alpha=1 - gamma)
    return branch


# --- pseudo-labels and losses ---------------------------------------------------


@dataclass(frozen=True)
class PseudoLabelResult:
    labels: torch.Tensor  # B x h x w int64
    valid: torch.Tensor  # B x h x w bool


@torch.no_grad()
def pseudo_label(p: torch.Tensor, tau: Optional[float] = None) -> PseudoLabelResult:
    """Per-pixel argmax (first index wins ties), gated by softmax confidence >= tau."""
    p = p.detach()
    labels = p.argmax(-1)
    if tau is None:
        valid = torch.ones_like(labels, dtype=torch.bool)
    else:
        valid = p.softmax(-1).amax(-1) >= tau
    return PseudoLabelResult(labels, valid)


Logits = Union[torch.Tensor, AugmentedLogits]


def _as_aug(p: Logits) -> AugmentedLogits:
    if isinstance(p, AugmentedLogits):
        return p
    return AugmentedLogits(p, 0.0, torch.ones(p.shape[:3], dtype=torch.bool))


def supervised_loss(p_s1_l: torch.Tensor, p_s2_l: torch.Tensor, y_l: torch.Tensor) -> torch.Tensor:
    """Sum of both students' cross-entropy against ground truth (at label resolution)."""
    return masked_cross_entropy(p_s1_l, y_l) + masked_cross_entropy(p_s2_l, y_l)


def consistency_st_loss(p_s1_u: Logits, p_s2_u: Logits, t1: PseudoLabelResult,
                        t2: PseudoLabelResult) -> torch.Tensor:
    """Teacher 2 supervises student 1 and teacher 1 supervises student 2."""
    return (isda_loss(_as_aug(p_s1_u), t2.labels, t2.valid)
            + isda_loss(_as_aug(p_s2_u), t1.labels, t1.valid))


def consistency_ss_loss(p_s1_u: Logits, p_s2_u: Logits,
                        targets: Optional[Sequence[PseudoLabelResult]] = None) -> torch.Tensor:
    """Each student against the other's detached argmax.

    ``targets`` is ``(labels for student 1, labels for student 2)``; by default
    they are the argmax of the other student's given logits.
    """
    a1, a2 = _as_aug(p_s1_u), _as_aug(p_s2_u)
    if targets is None:
        targets = (pseudo_label(a2.data), pseudo_label(a1.data))
    for_s1, for_s2 = targets
    return isda_loss(a1, for_s1.labels, for_s1.valid) + isda_loss(a2, for_s2.labels, for_s2.valid)


def poly_lr(step: int, cfg: TrainConfig) -> float:
    frac = min(max(step, 0), cfg.iters_max) / cfg.iters_max
    return cfg.lr0 * (1 - frac) ** cfg.lr_power


def rampup(step: int, length: int) -> float:
    """``exp(-5 (1 - t)^2)`` with ``t = step / length`` clipped to [0, 1]; 1 when ``length`` is 0."""
    if length <= 0:
        return 1.0
    t = min(max(step, 0), length) / length
    return math.exp(-5.0 * (1.0 - t) ** 2)


def unlabeled_weights(step: int, cfg: TrainConfig) -> tuple[float, float]:
    """``(alpha, beta)`` in effect at ``step``."""
    r = rampup(step, cfg.rampup_iters)
    return cfg.alpha * r, cfg.beta * r


def feature_lambda(step: int, cfg: TrainConfig) -> float:
    """Augmentation strength ramps linearly from 0 to ``lambda0``."""
    return cfg.lambda0 * step / cfg.iters_max


# --- one training step --------------------------------------------------------


@dataclass
class Batch:
    """Raw samples: lists (or stacked tensors) of ``H x W x 3`` images in [0, 1]."""

    x_l: Union[torch.Tensor, list]
    y_l: Union[torch.Tensor, list]
    x_u: Union[torch.Tensor, list]


@dataclass
class Views:
    x_w_l: torch.Tensor
    y_w_l: torch.Tensor
    x_w_u: torch.Tensor
    x_s_u: torch.Tensor
    mask: Optional[CutMixMask]


def make_views(batch: Batch, cfg: TrainConfig, rngs: RngStreams) -> Views:
    """Weak views for labeled/unlabeled data, strong (photometric + CutMix) for unlabeled."""
    aug = cfg.aug
    x_w_l, y_w_l, _ = weak_augment(batch.x_l, batch.y_l, cfg.crop, aug, rngs["aug-weak"])
    x_w_u, _, _ = weak_augment(batch.x_u, None, cfg.crop, aug, rngs["aug-weak"])
    x_s_u = strong_augment(x_w_u, aug, rngs["aug-strong"]) if aug.strong else x_w_u
    mask = None
    if aug.cutmix and x_s_u.shape[0] > 1:
        B, H, W = x_s_u.shape[:3]
        mask = sample_cutmix_mask(B, H, W, rngs["cutmix"])
        x_s_u = apply_cutmix_images(x_s_u, partner(x_s_u), mask)
    return Views(x_w_l, y_w_l.long(), x_w_u, x_s_u, mask)


@dataclass
class StepReport:
    step: int
    lr: float
    lam: float
    sup: float
    st: float
    ss: float
    total: float
    valid_fraction: tuple[float, float] = (1.0, 1.0)

    def to_json(self) -> str:
        rec = asdict(self)
        rec["valid_fraction"] = list(self.valid_fraction)
        return json.dumps({"type": "step", **rec})


@dataclass
class MKDState:
    branches: list[BranchState]
    stats: ClassFeatureStatistics
    step: int = 0


@dataclass
class StepInternals:
    """Intermediate tensors of a step, exposed for verification."""

    views: Views
    teacher_labels: Optional[tuple[PseudoLabelResult, PseudoLabelResult]] = None
    student_labels: Optional[tuple[PseudoLabelResult, PseudoLabelResult]] = None
    losses: dict = field(default_factory=dict)


def _teacher_logits(teacher: SegNet, x: torch.Tensor) -> torch.Tensor:
    teacher.eval()
    with torch.no_grad():
        return teacher(x).logits


def train_step(state: MKDState, batch: Batch, cfg: TrainConfig, rngs: RngStreams,
               views: Optional[Views] = None, internals: Optional[StepInternals] = None) -> StepReport:
    """Run one update in place on ``state``; see the module docstring for the order."""
    b1, b2 = state.branches
    step = state.step
    snapshot = [{n: t.clone() for n, t in _ema_tensors(b.teacher)} for b in (b1, b2)]

    ema_update(b1, cfg.gamma)
    ema_update(b2, cfg.gamma)

    if views is None:
        views = make_views(batch, cfg, rngs)
    alpha, beta = unlabeled_weights(step, cfg)
    use_unlabeled = alpha > 0 or beta > 0
    lam = feature_lambda(step, cfg)
    H, W = views.y_w_l.shape[1:3]

    t_res = None
    if alpha > 0:
        mixed = []
        for b in (b1, b2):
            p_t = _teacher_logits(b.teacher, views.x_w_u)
            if views.mask is not None:
                p_t = apply_cutmix_logits(p_t, partner(p_t), views.mask)
            mixed.append(p_t)
        t_res = (pseudo_label(mixed[0], cfg.tau), pseudo_label(mixed[1], cfg.tau))

    s1, s2 = b1.student, b2.student
    s1.train()
    s2.train()
    out_l = (s1(views.x_w_l), s2(views.x_w_l))
    sup = supervised_loss(upsample_logits(out_l[0].logits, H, W),
                          upsample_logits(out_l[1].logits, H, W), views.y_w_l)

    zero = sup.new_zeros(())
    st = ss = zero
    s_res = None
    out_u = None
    if use_unlabeled:
        out_u = (s1(views.x_s_u), s2(views.x_s_u))
    if alpha > 0:
        t1, t2 = t_res
        aug1 = augment_logits(out_u[0].features, s1.weight, s1.bias, t2.labels, state.stats, lam,
                              logits=out_u[0].logits)
        aug2 = augment_logits(out_u[1].features, s2.weight, s2.bias, t1.labels, state.stats, lam,
                              logits=out_u[1].logits)
        st = consistency_st_loss(aug1, aug2, t1, t2)
    if beta > 0:
        tau_ss = cfg.tau if cfg.tau_on_ss else None
        s_res = (pseudo_label(out_u[1].logits, tau_ss), pseudo_label(out_u[0].logits, tau_ss))
        aug1 = augment_logits(out_u[0].features, s1.weight, s1.bias, s_res[0].labels, state.stats,
                              lam, logits=out_u[0].logits)
        aug2 = augment_logits(out_u[1].features, s2.weight, s2.bias, s_res[1].labels, state.stats,
                              lam, logits=out_u[1].logits)
        ss = consistency_ss_loss(aug1, aug2, s_res)

    total = sup + alpha * st + beta * ss
    lr = poly_lr(step, cfg)
    if t_res is not None:
        vf = (t_res[1].valid.double().mean().item(), t_res[0].valid.double().mean().item())
    else:
        vf = (1.0, 1.0)
    sup_f, st_f, ss_f = sup.item(), st.item(), ss.item()
    report = StepReport(step, lr, lam, sup_f, st_f, ss_f, sup_f + alpha * st_f + beta * ss_f, vf)
    if internals is not None:
        internals.views = views
        internals.teacher_labels = t_res
        internals.student_labels = s_res
        internals.losses = {"sup": sup, "st": st, "ss": ss, "total": total}

    if not (math.isfinite(report.total) and torch.isfinite(total)):
        for b, snap in zip((b1, b2), snapshot):
            with torch.no_grad():
                for n, t in _ema_tensors(b.teacher):
                    t.copy_(snap[n])
        raise NonFiniteLossError(report)

    for b in (b1, b2):
        b.optimizer.zero_grad(set_to_none=True)
    total.backward()
    for b in (b1, b2):
        for group in b.optimizer.param_groups:
            group["lr"] = lr
        b.optimizer.step()

    stats = update_statistics(state.stats, out_l[0].features, _at(views.y_w_l, out_l[0].features))
    if use_unlabeled:
        # each student's features are filed under the targets that supervised them
        targets = (t_res[1], t_res[0]) if t_res is not None else s_res
        for out, target in zip(out_u, targets):
            stats = update_statistics(stats, out.features, target.labels, target.valid)
    state.stats = stats
    state.step = step + 1
    return report


def _at(labels: torch.Tensor, features: torch.Tensor) -> torch.Tensor:
    return downsample_nearest(labels, features.shape[1], features.shape[2])


def init_state(students: Sequence[SegNet], cfg: TrainConfig, feature_dim: int) -> MKDState:
    branches = [BranchState.from_student(s, cfg) for s in students]
    stats = ClassFeatureStatistics.empty(cfg.num_classes, feature_dim, full=cfg.full_covariance)
    return MKDState(branches, stats, 0)


__all__ = [
    "IGNORE",
    "Batch",
    "BranchState",
    "MKDState",
    "NonFiniteLossError",
    "PseudoLabelResult",
    "StepReport",
    "Views",
    "consistency_ss_loss",
    "consistency_st_loss",
    "ema_update",
    "feature_lambda",
    "init_state",
    "make_views",
    "poly_lr",
    "rampup",
    "pseudo_label",
    "supervised_loss",
    "train_step",
    "unlabeled_weights",
]
