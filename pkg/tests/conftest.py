import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def finite_difference_gradient(loss_fn, x: torch.Tensor, h: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. every element of x."""
    base = x.detach().clone()
    fd = np.zeros(base.shape, dtype=np.float64)
    for idx in np.ndindex(*base.shape):
        xp = base.clone()
        xp[idx] += h
        xm = base.clone()
        xm[idx] -= h
        fd[idx] = (loss_fn(xp).item() - loss_fn(xm).item()) / (2 * h)
    return fd


def assert_gradient_close(loss_fn, x: torch.Tensor, tol: float = 1e-4) -> None:
    """Autograd gradient must match central finite differences within tol,
    measured as inf-norm relative error (pointwise ratios blow up where the
    true gradient crosses zero)."""
    x = x.detach().clone().requires_grad_(True)
    loss_fn(x).backward()
    grad = x.grad.numpy()
    fd = finite_difference_gradient(loss_fn, x)
    scale = max(np.abs(fd).max(), 1e-12)
    rel = np.abs(grad - fd).max() / scale
    assert rel < tol, f"gradient mismatch: inf-norm relative error {rel:.3e} >= {tol}"
