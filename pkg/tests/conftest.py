import numpy as np
import pytest
import torch

from mkdseg.data import SyntheticSceneConfig, generate_synthetic, make_partition
from mkdseg.model import ArchConfig, init_model


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


def gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


TINY_ARCH = ArchConfig(widths=(4, 6, 8), feature_dim=5, num_classes=3)


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


@pytest.fixture
def tiny_model():
    return init_model(TINY_ARCH, gen(0), torch.float64)


@pytest.fixture(scope="session")
def small_synth():
    cfg = SyntheticSceneConfig(height=16, width=16, num_classes=3, shapes_per_image=(1, 2),
                               size_range=(0.3, 0.6), seed=3)
    return make_partition(generate_synthetic(cfg, 12), 4, 0)


def central_fd(fn, tensor: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``fn()`` w.r.t. ``tensor`` (in place)."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        plus = float(fn())
        flat[i] = orig - eps
        minus = float(fn())
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * eps)
    return grad


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-12)
    return num / den


def np_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)
