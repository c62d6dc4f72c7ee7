"""Implicit semantic feature augmentation.

Features of class ``y`` are treated as Gaussian-perturbed with the class
covariance ``Sigma_y`` scaled by ``lambda``.  The expected cross-entropy over
those perturbations is bounded above by an ordinary cross-entropy on adjusted
logits

    z_j = w_j f + b_j + lambda/2 (w_j - w_y)^T Sigma_y (w_j - w_y)

so no features are ever sampled during training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .core import IGNORE


@dataclass(frozen=True)
class ClassFeatureStatistics:
    """Running per-class feature mean and (diagonal or full) covariance.

    ``m2`` holds summed squared deviations from the mean, so ``cov = m2 / count``
    (population covariance).  Stored in float64 regardless of the model dtype.
    """

    count: torch.Tensor  # C
    mean: torch.Tensor  # C x D
    m2: torch.Tensor  # C x D, or C x D x D when full

    @classmethod
    def empty(cls, num_classes: int, dim: int, full: bool = False) -> "ClassFeatureStatistics":
        shape = (num_classes, dim, dim) if full else (num_classes, dim)
        return cls(torch.zeros(num_classes, dtype=torch.float64),
                   torch.zeros(num_classes, dim, dtype=torch.float64),
                   torch.zeros(shape, dtype=torch.float64))

    @property
    def full(self) -> bool:
        return self.m2.ndim == 3

    @property
    def num_classes(self) -> int:
        return self.count.shape[0]

    @property
    def cov(self) -> torch.Tensor:
        denom = self.count.clamp(min=1).view(-1, *([1] * (self.m2.ndim - 1)))
        return self.m2 / denom

    def state_dict(self) -> dict:
        return {"count": self.count.clone(), "mean": self.mean.clone(), "m2": self.m2.clone()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "ClassFeatureStatistics":
        return cls(state["count"].clone(), state["mean"].clone(), state["m2"].clone())


def update_statistics(stats: ClassFeatureStatistics, f: torch.Tensor, labels: torch.Tensor,
                      valid: Optional[torch.Tensor] = None) -> ClassFeatureStatistics:
    """Merge a batch of pixel features into the running statistics.

    ``labels`` must already be at feature resolution.  IGNORE pixels and pixels
    outside ``valid`` are skipped; classes absent from the batch are untouched.
    Uses the pairwise (Chan et al.) merge of count, mean and squared deviations.
    """
    feats = f.detach().reshape(-1, f.shape[-1]).to(torch.float64)
    y = labels.reshape(-1)
    keep = y != IGNORE
    if valid is not None:
        keep &= valid.reshape(-1).bool()
    feats, y = feats[keep], y[keep]

    count, mean, m2 = stats.count.clone(), stats.mean.clone(), stats.m2.clone()
    for c in torch.unique(y).tolist():
        fc = feats[y == c]
        n_b = fc.shape[0]
        mean_b = fc.mean(0)
        dev = fc - mean_b
        m2_b = dev.T @ dev if stats.full else (dev * dev).sum(0)
        n_a = count[c].item()
        n = n_a + n_b
        delta = mean_b - mean[c]
        mean[c] = mean[c] + delta * (n_b / n)
        corr = torch.outer(delta, delta) if stats.full else delta * delta
        m2[c] = m2[c] + m2_b + corr * (n_a * n_b / n)
        count[c] = n
    return ClassFeatureStatistics(count, mean, m2)


@dataclass(frozen=True)
class AugmentedLogits:
    data: torch.Tensor  # B x h x w x C
    lambda_used: float
    valid: torch.Tensor  # B x h x w bool; False where the target is IGNORE


def quadratic_terms(w: torch.Tensor, cov: torch.Tensor) -> torch.Tensor:
    """``Q[y, j] = (w_j - w_y)^T Sigma_y (w_j - w_y)`` as a C x C matrix."""
    v = w.unsqueeze(0) - w.unsqueeze(1)  # v[y, j] = w_j - w_y
    cov = cov.to(w.dtype)
    if cov.ndim == 3:
        return torch.einsum("yjd,yde,yje->yj", v, cov, v)
    return torch.einsum("yjd,yd->yj", v * v, cov)


def augment_logits(f: torch.Tensor, w: torch.Tensor, b: torch.Tensor, target: torch.Tensor,
                   stats: ClassFeatureStatistics, lam: float,
                   logits: Optional[torch.Tensor] = None) -> AugmentedLogits:
    """Adjusted logits for per-pixel targets ``target`` (at feature resolution).

    ``logits`` may be passed when the network already computed ``w f + b``;
    otherwise it is formed here.  The target channel is never modified.
    """
    base = logits if logits is not None else torch.einsum("bhwd,cd->bhwc", f, w) + b
    valid = target != IGNORE
    if lam == 0:
        return AugmentedLogits(base, 0.0, valid)
    q = quadratic_terms(w, stats.cov)
    safe = torch.where(valid, target, torch.zeros_like(target)).long()
    extra = q[safe] * valid.unsqueeze(-1).to(base.dtype)
    return AugmentedLogits(base + 0.5 * lam * extra, float(lam), valid)


def masked_cross_entropy(logits: torch.Tensor, target: torch.Tensor,
                         valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean cross-entropy over valid, non-IGNORE pixels of channels-last logits.

    With no valid pixels the result is an exact zero that still carries a
    (zero) gradient path to ``logits``.
    """
    keep = target != IGNORE
    if valid is not None:
        keep = keep & valid.bool()
    safe = torch.where(keep, target, torch.zeros_like(target)).long()
    ce = F.cross_entropy(logits.permute(0, 3, 1, 2), safe, reduction="none")
    ce = ce * keep.to(ce.dtype)
    n = int(keep.sum())
    if n == 0:
        return ce.sum() * 0.0
    return ce.sum() / n


def isda_loss(aug: AugmentedLogits, target: torch.Tensor,
              valid_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Upper-bound surrogate loss: cross-entropy on the augmented logits."""
    valid = aug.valid if valid_mask is None else aug.valid & valid_mask.bool()
    return masked_cross_entropy(aug.data, target, valid)


def mc_isda_loss(f, w, b, y: int, cov, lam: float, M: int,
                 rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo estimate of the expected CE under ``f ~ N(f, lam * Sigma_y)``.

    Test oracle only.  ``cov`` is the class covariance ``Sigma_y`` (diagonal
    vector or full matrix).  Returns ``(estimate, standard error)``.
    """
    f, w, b = (np.asarray(a, dtype=np.float64) for a in (f, w, b))
    cov = np.asarray(cov, dtype=np.float64)
    D = f.shape[0]
    z = rng.standard_normal((M, D))
    if cov.ndim == 1:
        noise = z * np.sqrt(lam * cov)
    else:
        evals, evecs = np.linalg.eigh(lam * cov)
        noise = z @ (evecs * np.sqrt(np.clip(evals, 0, None))).T
    scores = (f + noise) @ w.T + b
    top = scores.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(scores - top).sum(axis=1))
    ce = lse - scores[:, y]
    if M == 1:
        return float(ce[0]), float("inf")
    return float(ce.mean()), float(ce.std(ddof=1) / np.sqrt(M))
