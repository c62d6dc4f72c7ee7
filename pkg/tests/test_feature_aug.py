import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mkdseg.core import IGNORE
from mkdseg.feature_aug import (
    ClassFeatureStatistics,
    augment_logits,
    isda_loss,
    masked_cross_entropy,
    mc_isda_loss,
    update_statistics,
)

from conftest import central_fd, gen, rel_error


def _stats_with_cov(cov):
    """Statistics whose covariance equals ``cov`` (C x D or C x D x D), count 1."""
    cov = torch.as_tensor(cov, dtype=torch.float64)
    C, D = cov.shape[:2]
    return ClassFeatureStatistics(torch.ones(C, dtype=torch.float64),
                                  torch.zeros(C, D, dtype=torch.float64), cov.clone())


def _scalar_augmented(f, w, b, y, cov_y, lam):
    """Plain-Python evaluation of the adjusted score for every class."""
    C, D = len(w), len(f)
    out = []
    for j in range(C):
        z = sum(w[j][d] * f[d] for d in range(D)) + b[j]
        quad = sum((w[j][d] - w[y][d]) ** 2 * cov_y[d] for d in range(D))
        out.append(z + lam / 2 * quad)
    return out


def test_hand_instance():
    expected = _scalar_augmented([0.5], [[1.0], [-1.0]], [0.0, 0.0], 0, [1.0], 2.0)
    assert expected == [0.5, 3.5]
    f = torch.tensor([[[[0.5]]]], dtype=torch.float64)
    w = torch.tensor([[1.0], [-1.0]], dtype=torch.float64)
    b = torch.zeros(2, dtype=torch.float64)
    stats = _stats_with_cov([[1.0], [0.0]])
    aug = augment_logits(f, w, b, torch.tensor([[[0]]]), stats, 2.0)
    assert torch.allclose(aug.data[0, 0, 0], torch.tensor(expected, dtype=torch.float64), atol=1e-15)


def _random_instance(seed, B=2, h=3, w_=3, C=3, D=4):
    g = gen(seed)
    f = torch.randn(B, h, w_, D, generator=g, dtype=torch.float64)
    w = torch.randn(C, D, generator=g, dtype=torch.float64)
    b = torch.randn(C, generator=g, dtype=torch.float64)
    y = torch.randint(0, C, (B, h, w_), generator=g)
    cov = torch.rand(C, D, generator=g, dtype=torch.float64)
    return f, w, b, y, _stats_with_cov(cov)


def test_matches_scalar_oracle_everywhere():
    f, w, b, y, stats = _random_instance(0)
    aug = augment_logits(f, w, b, y, stats, 0.7)
    W, B_, cov = w.tolist(), b.tolist(), stats.cov.tolist()
    for idx in np.ndindex(*y.shape):
        yy = int(y[idx])
        expect = _scalar_augmented(f[idx].tolist(), W, B_, yy, cov[yy], 0.7)
        assert np.allclose(aug.data[idx].tolist(), expect, atol=1e-12)


def test_lambda_zero_and_zero_cov_are_plain_logits():
    f, w, b, y, stats = _random_instance(1)
    logits = torch.einsum("bhwd,cd->bhwc", f, w) + b
    assert torch.equal(augment_logits(f, w, b, y, stats, 0.0, logits=logits).data, logits)
    zero = _stats_with_cov(torch.zeros(3, 4))
    assert torch.equal(augment_logits(f, w, b, y, zero, 5.0, logits=logits).data, logits)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 5.0))
def test_target_channel_untouched(seed, lam):
    f, w, b, y, stats = _random_instance(seed)
    logits = torch.einsum("bhwd,cd->bhwc", f, w) + b
    aug = augment_logits(f, w, b, y, stats, lam, logits=logits)
    idx = y.unsqueeze(-1)
    assert torch.equal(aug.data.gather(-1, idx), logits.gather(-1, idx))
    assert (aug.data >= logits).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0), st.floats(0.0, 3.0))
def test_loss_nondecreasing_in_lambda(seed, l1, l2):
    f, w, b, y, stats = _random_instance(seed)
    lo, hi = sorted((l1, l2))
    a = isda_loss(augment_logits(f, w, b, y, stats, lo), y)
    c = isda_loss(augment_logits(f, w, b, y, stats, hi), y)
    assert c.item() >= a.item() - 1e-12


def test_ignore_pixels_excluded():
    f, w, b, y, stats = _random_instance(2)
    y[0] = IGNORE
    aug = augment_logits(f, w, b, y, stats, 1.0)
    assert not aug.valid[0].any() and aug.valid[1].all()
    full = isda_loss(aug, y)
    only = isda_loss(augment_logits(f[1:], w, b, y[1:], stats, 1.0), y[1:])
    assert torch.allclose(full, only, atol=1e-14)


def test_lambda_zero_is_cross_entropy():
    f, w, b, y, stats = _random_instance(3)
    logits = torch.einsum("bhwd,cd->bhwc", f, w) + b
    ce = torch.nn.functional.cross_entropy(logits.reshape(-1, 3), y.reshape(-1))
    assert torch.allclose(isda_loss(augment_logits(f, w, b, y, stats, 0.0), y), ce, atol=1e-14)


def test_saturated_pixel_loss_near_zero():
    aug = augment_logits(torch.zeros(1, 1, 1, 1, dtype=torch.float64),
                         torch.zeros(2, 1, dtype=torch.float64),
                         torch.tensor([1000.0, 0.0], dtype=torch.float64),
                         torch.tensor([[[0]]]), _stats_with_cov([[1.0], [1.0]]), 0.0)
    assert isda_loss(aug, torch.tensor([[[0]]])).item() < 1e-12


def test_empty_valid_mask_gives_zero_with_zero_grad():
    p = torch.randn(1, 2, 2, 3, dtype=torch.float64, requires_grad=True)
    y = torch.full((1, 2, 2), IGNORE)
    loss = masked_cross_entropy(p, y)
    assert loss.item() == 0.0
    loss.backward()
    assert torch.equal(p.grad, torch.zeros_like(p))


def test_isda_gradients_match_finite_differences():
    f, w, b, y, stats = _random_instance(4, B=1, h=2, w_=2)
    f.requires_grad_(True); w.requires_grad_(True); b.requires_grad_(True)

    def loss():
        return isda_loss(augment_logits(f, w, b, y, stats, 1.3), y)

    loss().backward()
    for t in (f, w, b):
        with torch.no_grad():
            assert rel_error(t.grad, central_fd(loss, t)) < 1e-4


# --- statistics -------------------------------------------------------------------


def test_constant_features_have_zero_cov():
    stats = ClassFeatureStatistics.empty(2, 3)
    v = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    f = v.expand(1, 2, 2, 3)
    stats = update_statistics(stats, f, torch.zeros(1, 2, 2, dtype=torch.long))
    assert torch.allclose(stats.mean[0], v) and torch.equal(stats.cov[0], torch.zeros(3, dtype=torch.float64))
    assert stats.count.tolist() == [4, 0]


def test_two_point_population_variance():
    stats = ClassFeatureStatistics.empty(2, 1)
    f = torch.tensor([0.0, 2.0], dtype=torch.float64).view(1, 1, 2, 1)
    stats = update_statistics(stats, f, torch.ones(1, 1, 2, dtype=torch.long))
    assert stats.mean[1].item() == 1.0 and stats.cov[1].item() == 1.0


@pytest.mark.parametrize("full", [False, True])
def test_streaming_matches_recomputation(full):
    g = gen(7)
    stats = ClassFeatureStatistics.empty(3, 4, full=full)
    seen_f, seen_y = [], []
    for chunk in (10, 25, 1, 30, 34):
        f = torch.randn(1, 1, chunk, 4, generator=g, dtype=torch.float64) * 3 + 1
        y = torch.randint(0, 3, (1, 1, chunk), generator=g)
        y[0, 0, 0] = IGNORE
        prev_count = stats.count.clone()
        stats = update_statistics(stats, f, y)
        assert (stats.count >= prev_count).all()
        seen_f.append(f.reshape(-1, 4)); seen_y.append(y.reshape(-1))
    F_, Y = torch.cat(seen_f), torch.cat(seen_y)
    assert sum(c for c in (F_.shape[0],)) == 100
    for c in range(3):
        fc = F_[Y == c]
        assert stats.count[c].item() == fc.shape[0]
        assert torch.allclose(stats.mean[c], fc.mean(0), atol=1e-10, rtol=0)
        dev = fc - fc.mean(0)
        cov = dev.T @ dev / fc.shape[0] if full else (dev ** 2).mean(0)
        assert torch.allclose(stats.cov[c], cov, atol=1e-10, rtol=0)


def test_absent_classes_unchanged():
    stats = update_statistics(ClassFeatureStatistics.empty(3, 2),
                              torch.randn(1, 1, 4, 2, dtype=torch.float64),
                              torch.tensor([[[0, 0, 1, 1]]]))
    after = update_statistics(stats, torch.randn(1, 1, 2, 2, dtype=torch.float64),
                              torch.tensor([[[0, 0]]]))
    assert torch.equal(after.mean[1], stats.mean[1]) and torch.equal(after.m2[1], stats.m2[1])
    assert after.count[2] == 0


def test_full_covariance_quadratic_matches_diagonal_when_diagonal():
    f, w, b, y, stats = _random_instance(5)
    full = _stats_with_cov(torch.diag_embed(stats.cov))
    a = augment_logits(f, w, b, y, stats, 0.9).data
    c = augment_logits(f, w, b, y, full, 0.9).data
    assert torch.allclose(a, c, atol=1e-12)


# --- Monte-Carlo oracle -------------------------------------------------------------


def test_mc_lambda_zero_is_deterministic_ce():
    f, w, b = np.array([0.3, -0.2]), np.array([[1.0, 0.5], [-0.3, 0.2]]), np.array([0.1, -0.1])
    est, se = mc_isda_loss(f, w, b, 1, np.ones(2), 0.0, 1000, np.random.default_rng(0))
    z = w @ f + b
    ce = math.log(math.exp(z[0]) + math.exp(z[1])) - z[1]
    assert se == 0.0 and abs(est - ce) < 1e-12


def test_mc_standard_error_shrinks():
    f, w, b = np.array([0.3, -0.2]), np.array([[1.0, 0.5], [-0.3, 0.2]]), np.array([0.1, -0.1])
    _, se1 = mc_isda_loss(f, w, b, 0, np.ones(2), 1.0, 1, np.random.default_rng(0))
    _, se_small = mc_isda_loss(f, w, b, 0, np.ones(2), 1.0, 1000, np.random.default_rng(0))
    _, se_big = mc_isda_loss(f, w, b, 0, np.ones(2), 1.0, 100_000, np.random.default_rng(0))
    assert se1 == math.inf
    assert 5 < se_small / se_big < 20  # ~ sqrt(100)


def test_mc_below_closed_form_bound():
    g = np.random.default_rng(1)
    C, D = 3, 4
    f, w, b = g.normal(size=D), g.normal(size=(C, D)), g.normal(size=C)
    cov = g.uniform(0, 1, size=(C, D))
    y = 2
    est, se = mc_isda_loss(f, w, b, y, cov[y], 1.0, 200_000, g)
    aug = augment_logits(torch.tensor(f).view(1, 1, 1, D), torch.tensor(w), torch.tensor(b),
                         torch.tensor([[[y]]]), _stats_with_cov(cov), 1.0)
    bound = isda_loss(aug, torch.tensor([[[y]]])).item()
    assert est <= bound + 3 * se
