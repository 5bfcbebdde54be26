import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)


def central_difference(fn, x: torch.Tensor, step: float = 1e-5) -> torch.Tensor:
    """Elementwise central finite-difference gradient of scalar fn at x."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x).detach())
        flat[i] = orig - step
        lo = float(fn(x).detach())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom


@pytest.fixture
def rng():
    return np.random.default_rng(7)
