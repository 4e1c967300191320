"""Training losses for the two stages.

Stage 1 regresses the centre-likelihood map: soft-target binary cross
entropy everywhere plus a focal term restricted to near-certain centre
voxels. Stage 2 classifies foreground/background against pseudo labels
and adds the image-guided boundary refinement term.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .refine import RefineLossParams, boundary_loss

EPS = 1e-7


@dataclass(frozen=True)
class S1LossParams:
    lambda_focal: float = 1.0
    gamma: float = 2.0
    focal_target_threshold: float = 0.7

    def __post_init__(self):
        if self.lambda_focal < 0:
            raise ValueError(f"lambda_focal must be >= 0, got {self.lambda_focal}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.focal_target_threshold < 1:
            raise ValueError(
                f"focal_target_threshold must be in (0,1), got {self.focal_target_threshold}"
            )


def s1_loss_parts(pred: torch.Tensor, target: torch.Tensor, params: S1LossParams):
    """(bce, focal) components of the stage-1 loss."""
    if pred.shape != target.shape:
        raise ValueError(f"pred dims {tuple(pred.shape)} != target dims {tuple(target.shape)}")
    p = pred.clamp(EPS, 1.0 - EPS)
    bce = -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()
    mask = target > params.focal_target_threshold
    if mask.any():
        pm = p[mask]
        focal = ((1.0 - pm) ** params.gamma * (-torch.log(pm))).mean()
    else:
        focal = p.new_zeros(())
    return bce, focal


def s1_loss(pred: torch.Tensor, target: torch.Tensor, params: S1LossParams) -> torch.Tensor:
    """Soft-target BCE over all voxels + lambda * focal term over voxels
    whose target exceeds the threshold (zero when there are none)."""
    bce, focal = s1_loss_parts(pred, target, params)
    return bce + params.lambda_focal * focal


def s2_loss_parts(
    scores: torch.Tensor,
    pseudo: torch.Tensor,
    image: torch.Tensor,
    refine: RefineLossParams,
):
    """(cross_entropy, boundary) components of the stage-2 loss.

    scores: (2, z, y, x) class scores; pseudo: binary foreground target;
    image: the raw stack guiding the boundary term.
    """
    if scores.ndim != 4 or scores.shape[0] != 2:
        raise ValueError(f"scores must be (2, z, y, x), got {tuple(scores.shape)}")
    if scores.shape[1:] != pseudo.shape:
        raise ValueError(
            f"scores dims {tuple(scores.shape[1:])} != pseudo dims {tuple(pseudo.shape)}"
        )
    if pseudo.shape != image.shape:
        raise ValueError(f"pseudo dims {tuple(pseudo.shape)} != image dims {tuple(image.shape)}")
    fg = torch.softmax(scores, dim=0)[1]
    p = fg.clamp(EPS, 1.0 - EPS)
    t = pseudo.to(p.dtype)
    ce = -(t * torch.log(p) + (1.0 - t) * torch.log(1.0 - p)).mean()
    if refine.lambda_refine == 0:
        return ce, fg.new_zeros(())
    bl = boundary_loss(fg, image.to(p.dtype), refine)
    return ce, bl


def s2_loss(
    scores: torch.Tensor,
    pseudo: torch.Tensor,
    image: torch.Tensor,
    refine: RefineLossParams,
) -> torch.Tensor:
    """Two-class cross entropy against the pseudo label + lambda times the
    boundary refinement term on the foreground probability channel."""
    ce, bl = s2_loss_parts(scores, pseudo, image, refine)
    return ce + refine.lambda_refine * bl
