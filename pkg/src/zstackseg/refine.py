"""Image-guided boundary refinement loss and its smoothing/derivative operators.

The loss pulls segmentation-mask edges toward locations where the image
response (Laplacian-of-Gaussian for bright-field stacks, gradient
magnitude for fluorescence) is strong: each voxel pays the smoothed mask
gradient weighted by exp(-|response|^p), so mask edges sitting on image
boundaries are cheap and edges in flat image regions are expensive. The
penalty is asymmetric by construction: image boundaries without mask
edges cost nothing.

All operators accept torch tensors (differentiable), numpy arrays, or
Volumes, and return the same kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .volio import Volume

MODES = ("laplacian", "gradient")


@dataclass(frozen=True)
class RefineLossParams:
    """mode "laplacian" suits bright-field stacks (blob boundaries), mode
    "gradient" suits fluorescence. sigma1 smooths the mask, sigma2 the
    image; the image response is divided by its per-volume max before the
    exponent unless normalize_response is off."""

    mode: str = "laplacian"
    lambda_refine: float = 1.0
    sigma1: float = 3.0
    sigma2: float = 3.0
    p_norm: float = 2.0
    normalize_response: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.sigma1 <= 0 or self.sigma2 <= 0:
            raise ValueError("sigmas must be > 0")
        if self.p_norm < 1:
            raise ValueError(f"p_norm must be >= 1, got {self.p_norm}")
        if self.lambda_refine < 0:
            raise ValueError(f"lambda_refine must be >= 0, got {self.lambda_refine}")


def _to_tensor(v):
    """Normalize Volume / ndarray / tensor input; remember how to convert back."""
    if isinstance(v, Volume):
        t = torch.from_numpy(np.ascontiguousarray(v.data.astype(np.float32)))
        return t, ("volume", v.spacing)
    if isinstance(v, np.ndarray):
        arr = v if np.issubdtype(v.dtype, np.floating) else v.astype(np.float32)
        return torch.from_numpy(np.ascontiguousarray(arr)), ("ndarray", None)
    if isinstance(v, torch.Tensor):
        return v, ("tensor", None)
    raise TypeError(f"expected Volume, ndarray or tensor, got {type(v)}")


def _from_tensor(t: torch.Tensor, origin):
    kind, extra = origin
    if kind == "tensor":
        return t
    if kind == "ndarray":
        return t.detach().numpy()
    return Volume(t.detach().numpy().astype(np.float32), extra)


def _reflect_indices(n: int, pad: int) -> torch.Tensor:
    """Mirror-about-edge indices for arbitrary pad (period 2(n-1))."""
    if n == 1:
        return torch.zeros(1 + 2 * pad, dtype=torch.long)
    idx = torch.arange(-pad, n + pad)
    period = 2 * (n - 1)
    idx = idx % period
    return torch.where(idx >= n, period - idx, idx)


def _gauss_kernel(sigma: float, dtype) -> torch.Tensor:
    radius = math.ceil(3.0 * sigma)
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(offs**2) / (2.0 * sigma * sigma))
    w /= w.sum()
    return torch.from_numpy(w).to(dtype)


def gaussian_smooth(v, sigma: float):
    """Separable Gaussian smoothing with reflect padding; kernel radius
    ceil(3*sigma), renormalized to sum 1 (linear and mass-preserving)."""
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    t, origin = _to_tensor(v)
    kernel = _gauss_kernel(sigma, t.dtype)
    radius = (kernel.numel() - 1) // 2
    out = t.reshape(1, 1, *t.shape)
    for axis in (2, 3, 4):
        idx = _reflect_indices(out.shape[axis], radius)
        padded = out.index_select(axis, idx)
        shape = [1, 1, 1, 1, 1]
        shape[axis] = kernel.numel()
        out = F.conv3d(padded, kernel.reshape(shape))
    return _from_tensor(out.reshape(t.shape), origin)


def _axis_diff(t: torch.Tensor, axis: int) -> torch.Tensor:
    """Central differences, one-sided at the two boundary slices."""
    n = t.shape[axis]
    lead = t.narrow(axis, 1, 1) - t.narrow(axis, 0, 1)
    trail = t.narrow(axis, n - 1, 1) - t.narrow(axis, n - 2, 1)
    if n == 2:
        return torch.cat([lead, trail], dim=axis)
    mid = (t.narrow(axis, 2, n - 2) - t.narrow(axis, 0, n - 2)) * 0.5
    return torch.cat([lead, mid, trail], dim=axis)


def gradient_magnitude(v):
    """Per-voxel Euclidean magnitude of the central-difference gradient."""
    t, origin = _to_tensor(v)
    if min(t.shape) < 2:
        raise ValueError(f"gradient_magnitude needs dims >= 2 per axis, got {tuple(t.shape)}")
    dz, dy, dx = (_axis_diff(t, axis) for axis in range(3))
    sq = dz * dz + dy * dy + dx * dx
    # zero-subgradient at exact zeros instead of sqrt's NaN
    pos = sq > 0
    mag = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return _from_tensor(mag, origin)


def _shift_replicate(t: torch.Tensor, axis: int, step: int) -> torch.Tensor:
    n = t.shape[axis]
    idx = torch.clamp(torch.arange(n) + step, 0, n - 1)
    return t.index_select(axis, idx)


def laplacian(v):
    """7-point stencil (neighbour sum minus 6x centre), replicate borders.
    Accumulated in difference form so constant volumes give exact zeros."""
    t, origin = _to_tensor(v)
    if min(t.shape) < 3:
        raise ValueError(f"laplacian needs dims >= 3 per axis, got {tuple(t.shape)}")
    out = torch.zeros_like(t)
    for axis in range(3):
        out = out + (_shift_replicate(t, axis, 1) - t) + (_shift_replicate(t, axis, -1) - t)
    return _from_tensor(out, origin)


def mask_edge_term(S, sigma: float):
    """The mask-dependent factor of the loss: |grad G(S, sigma)|."""
    return gradient_magnitude(gaussian_smooth(S, sigma))


def refinement_weight(image, params: RefineLossParams):
    """Per-voxel weight exp(-|R|^p) from the smoothed image response R."""
    t, origin = _to_tensor(image)
    sm = gaussian_smooth(t, params.sigma2)
    if params.mode == "laplacian":
        resp = laplacian(sm)
    else:
        resp = gradient_magnitude(sm)
    if params.normalize_response:
        peak = resp.abs().max()
        if peak > 0:
            resp = resp / peak
        else:
            # flat response: weight falls back to 1 everywhere
            return _from_tensor(torch.ones_like(t), origin)
    w = torch.exp(-(resp.abs() ** params.p_norm))
    return _from_tensor(w, origin)


def boundary_loss(S, image, params: RefineLossParams):
    """Mean over voxels of the smoothed mask gradient, downweighted where
    the image response is strong. Differentiable in S; exactly zero for a
    constant S."""
    s_t, s_origin = _to_tensor(S)
    i_t, _ = _to_tensor(image)
    if s_t.shape != i_t.shape:
        raise ValueError(f"mask dims {tuple(s_t.shape)} != image dims {tuple(i_t.shape)}")
    edge = mask_edge_term(s_t, params.sigma1)
    w, _ = _to_tensor(refinement_weight(i_t.to(s_t.dtype), params))
    loss = (edge * w).mean()
    if s_origin[0] == "tensor":
        return loss
    return float(loss)
