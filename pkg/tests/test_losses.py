import numpy as np
import pytest
import torch

from conftest import assert_gradient_close
from zstackseg.losses import S1LossParams, s1_loss, s1_loss_parts, s2_loss, s2_loss_parts
from zstackseg.refine import RefineLossParams


def test_s1_constant_half():
    p = torch.full((3, 3, 3), 0.5, dtype=torch.float64)
    loss = s1_loss(p, p.clone(), S1LossParams())
    # no voxel exceeds the focal gate, so the focal term is zero
    assert loss.item() == pytest.approx(-np.log(0.5), rel=1e-12)


def test_s1_single_voxel_closed_form():
    pred = torch.tensor([[[0.9]]], dtype=torch.float64)
    target = torch.tensor([[[1.0]]], dtype=torch.float64)
    loss = s1_loss(pred, target, S1LossParams(lambda_focal=1.0, gamma=2.0))
    bce = -np.log(0.9)
    focal = 0.01 * (-np.log(0.9))
    assert loss.item() == pytest.approx(bce + focal, rel=1e-12)


def test_s1_lambda_zero_is_plain_bce(rng):
    params0 = S1LossParams(lambda_focal=0.0)
    for _ in range(10):
        pred = torch.tensor(rng.uniform(0.02, 0.98, (4, 4, 4)), dtype=torch.float64)
        target = torch.tensor(rng.random((4, 4, 4)), dtype=torch.float64)
        loss = s1_loss(pred, target, params0)
        bce = -(target * torch.log(pred) + (1 - target) * torch.log(1 - pred)).mean()
        assert abs(loss.item() - bce.item()) < 1e-12


def test_s1_focal_zero_without_gated_voxels(rng):
    pred = torch.tensor(rng.uniform(0.1, 0.9, (3, 3, 3)), dtype=torch.float64)
    target = torch.full((3, 3, 3), 0.5, dtype=torch.float64)
    _, focal = s1_loss_parts(pred, target, S1LossParams())
    assert focal.item() == 0.0


def test_s1_clamps_extreme_predictions():
    pred = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    target = torch.tensor([[[0.0, 1.0]]], dtype=torch.float64)
    loss = s1_loss(pred, target, S1LossParams())
    assert torch.isfinite(loss)


def test_s1_gradient_check(rng):
    params = S1LossParams()
    target = torch.tensor(rng.random((4, 4, 4)), dtype=torch.float64)
    pred0 = torch.tensor(rng.uniform(0.1, 0.9, (4, 4, 4)), dtype=torch.float64)
    assert_gradient_close(lambda p: s1_loss(p, target, params), pred0)


def test_s1_shape_mismatch():
    with pytest.raises(ValueError, match="dims"):
        s1_loss(torch.rand(2, 2, 2), torch.rand(2, 2, 3), S1LossParams())


def test_s1_nonnegative(rng):
    params = S1LossParams()
    for _ in range(10):
        pred = torch.tensor(rng.uniform(0.01, 0.99, (3, 3, 3)), dtype=torch.float64)
        target = torch.tensor(rng.random((3, 3, 3)), dtype=torch.float64)
        assert s1_loss(pred, target, params).item() >= 0


def _region_fixture():
    """Confident, correct prediction of a two-region pseudo label."""
    pseudo = torch.zeros((4, 8, 8), dtype=torch.float64)
    pseudo[:, :, 4:] = 1.0
    scores = torch.zeros((2, 4, 8, 8), dtype=torch.float64)
    scores[0] = 40.0 * (1 - pseudo)
    scores[1] = 40.0 * pseudo
    image = torch.full((4, 8, 8), 0.5, dtype=torch.float64)
    return scores, pseudo, image


def test_s2_perfect_prediction():
    scores, pseudo, image = _region_fixture()
    ce, bl = s2_loss_parts(scores, pseudo, image, RefineLossParams())
    assert ce.item() < 1e-6  # zero up to the epsilon clamp
    assert torch.isfinite(bl)


def test_s2_zero_lambda_reduces_to_cross_entropy(rng):
    scores = torch.tensor(rng.uniform(-2, 2, (2, 4, 6, 6)), dtype=torch.float64)
    pseudo = torch.tensor((rng.random((4, 6, 6)) > 0.5).astype(np.float64))
    image = torch.tensor(rng.random((4, 6, 6)), dtype=torch.float64)
    params = RefineLossParams(lambda_refine=0.0)
    ce, _ = s2_loss_parts(scores, pseudo, image, params)
    assert s2_loss(scores, pseudo, image, params).item() == ce.item()


def test_s2_gradient_check(rng):
    params = RefineLossParams()
    pseudo = torch.tensor((rng.random((4, 8, 8)) > 0.5).astype(np.float64))
    image = torch.tensor(rng.random((4, 8, 8)), dtype=torch.float64)
    scores0 = torch.tensor(rng.uniform(-1, 1, (2, 4, 8, 8)), dtype=torch.float64)
    assert_gradient_close(lambda s: s2_loss(s, pseudo, image, params), scores0)


def test_s2_gradient_check_gradient_mode(rng):
    params = RefineLossParams(mode="gradient")
    pseudo = torch.tensor((rng.random((4, 8, 8)) > 0.5).astype(np.float64))
    image = torch.tensor(rng.random((4, 8, 8)), dtype=torch.float64)
    scores0 = torch.tensor(rng.uniform(-1, 1, (2, 4, 8, 8)), dtype=torch.float64)
    assert_gradient_close(lambda s: s2_loss(s, pseudo, image, params), scores0)


def test_s2_shape_checks(rng):
    params = RefineLossParams()
    with pytest.raises(ValueError, match="scores"):
        s2_loss(torch.rand(3, 4, 4, 4), torch.rand(4, 4, 4), torch.rand(4, 4, 4), params)
    with pytest.raises(ValueError, match="dims"):
        s2_loss(torch.rand(2, 4, 4, 4), torch.rand(4, 4, 5), torch.rand(4, 4, 5), params)
