import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from sackit.errors import ConfigurationError, DegenerateInputError, ShapeError
from sackit.losses import LossForm, bce_loss, dice_loss, hybrid_loss

probs = hnp.arrays(np.float64, 16, elements=st.floats(0, 1))
masks = hnp.arrays(np.float64, 16, elements=st.sampled_from([0.0, 1.0]))


def test_bce_by_hand():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2), abs=1e-6)
    assert bce_loss([0.5, 0.5], [1, 0], "sum") == pytest.approx(2 * math.log(2), abs=1e-6)
    assert bce_loss([0.5, 0.5], [1, 0], "mean") == pytest.approx(math.log(2), abs=1e-6)


def test_bce_perfect_prediction_tends_to_zero():
    g = np.array([1.0, 0.0, 1.0])
    values = [bce_loss(g, g, eps=eps) for eps in (1e-3, 1e-5, 1e-7)]
    assert values[0] > values[1] > values[2] > 0
    assert values[2] < 1e-6


def test_dice_by_hand():
    g = np.array([1.0, 1.0, 0.0, 1.0])
    assert dice_loss(g, g, smooth=0) == 0.0
    assert dice_loss(np.full(4, 0.5), [1, 0, 0, 0], smooth=0) == pytest.approx(0.5)
    assert dice_loss(np.zeros(4), [0, 1, 1, 0], smooth=0) == 1.0


def test_dice_empty_masks():
    with pytest.raises(DegenerateInputError):
        dice_loss(np.zeros(4), np.zeros(4), smooth=0)
    assert dice_loss(np.zeros(4), np.zeros(4)) == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        bce_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ShapeError):
        dice_loss(np.zeros((2, 2)), np.zeros(4))


def test_hybrid_endpoints_and_weighted_example():
    p, g = np.array([0.3, 0.8, 0.6]), np.array([0.0, 1.0, 1.0])
    assert hybrid_loss(LossForm("convex_hybrid", 0.0), p, g) == dice_loss(p, g)
    assert hybrid_loss(LossForm("convex_hybrid", 1.0), p, g) == bce_loss(p, g)
    form = LossForm("weighted_hybrid", 0.65, smooth=0.0)
    value = hybrid_loss(form, [0.5, 0.5], [1, 0])
    assert value == pytest.approx(math.log(2) + 0.65 / 3, abs=1e-6)
    assert value == pytest.approx(0.909814, abs=1e-6)


def test_lambda_domains():
    for bad in (-0.1, 1.5, None):
        with pytest.raises(ConfigurationError):
            LossForm("convex_hybrid", bad)
    for bad in (0.0, -1.0, float("inf"), None):
        with pytest.raises(ConfigurationError):
            LossForm("weighted_hybrid", bad)
    with pytest.raises(ConfigurationError):
        LossForm("bce", 0.5)
    with pytest.raises(ConfigurationError):
        LossForm("focal")
    with pytest.raises(ConfigurationError):
        LossForm("bce", reduction="median")


def test_form_round_trip():
    form = LossForm("weighted_hybrid", 0.65, "sum", 0.0)
    assert LossForm.from_dict(form.to_dict()) == form
    assert form.to_dict()["lambda"] == 0.65
    assert form.label() == "BCE+0.65*Dice"


def test_torch_inputs_stay_differentiable():
    p = torch.full((4,), 0.4, requires_grad=True)
    loss = hybrid_loss(LossForm("convex_hybrid", 0.3), p, torch.tensor([1.0, 0.0, 1.0, 0.0]))
    assert isinstance(loss, torch.Tensor) and loss.ndim == 0
    loss.backward()
    assert p.grad is not None and torch.isfinite(p.grad).all()


@given(probs, masks, st.floats(0, 1))
def test_dice_is_bounded(p, g, smooth):
    if smooth == 0 and np.sum(p * p) + np.sum(g * g) == 0:
        return  # undefined; covered by the underflow test below
    value = dice_loss(p, g, smooth)
    assert -1e-12 <= value <= 1 + 1e-12


def test_dice_with_underflowing_denominator_is_degenerate():
    p = np.full(16, 1.1125369292536007e-308)
    with pytest.raises(DegenerateInputError):
        dice_loss(p, np.zeros(16), 0.0)
    assert dice_loss(p, np.zeros(16)) == pytest.approx(0.0)


@given(masks, masks)
def test_dice_symmetric_for_binary(p, g):
    if not (p.any() or g.any()):
        return
    assert dice_loss(p, g, 0.0) == pytest.approx(dice_loss(g, p, 0.0), abs=1e-15)


@settings(max_examples=50)
@given(probs, masks, st.floats(0, 1), st.floats(0, 1))
def test_convex_hybrid_linear_in_lambda(p, g, a, t):
    lo = hybrid_loss(LossForm("convex_hybrid", 0.0), p, g)
    hi = hybrid_loss(LossForm("convex_hybrid", 1.0), p, g)
    mid = hybrid_loss(LossForm("convex_hybrid", t), p, g)
    assert mid == pytest.approx(t * hi + (1 - t) * lo, rel=1e-9, abs=1e-9)


@given(probs, masks)
def test_bce_nonnegative_and_sum_is_n_times_mean(p, g):
    mean = bce_loss(p, g)
    assert mean >= 0
    assert bce_loss(p, g, "sum") == pytest.approx(p.size * mean, rel=1e-12)
