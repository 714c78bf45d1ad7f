import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmt.exceptions import DimensionError, DomainError
from mdmt.losses import PROB_CLAMP, bce, detection_loss, dice_loss, voxel_ce
from mdmt.tensor import Tensor, grad_check


def loop_bce(p, t):
    """Scalar-loop reference with the same clamp."""
    total = 0.0
    for pi, ti in zip(np.ravel(p), np.ravel(t)):
        pi = min(max(pi, PROB_CLAMP), 1 - PROB_CLAMP)
        total += -(ti * math.log(pi) + (1 - ti) * math.log(1 - pi))
    return total / np.size(p)


# -- bce --------------------------------------------------------------------------

def test_bce_half_against_positive_is_ln2():
    assert bce(Tensor([0.5]), [1.0]).item() == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("y", [0.0, 1.0])
def test_bce_perfect_prediction(y):
    assert bce(Tensor([y]), [y]).item() <= 1e-6


def test_bce_clamped_floor():
    # -ln(1e-7) = 16.11809565...
    assert bce(Tensor([1e-7]), [1.0]).item() == pytest.approx(-math.log(1e-7), abs=1e-9)
    assert bce(Tensor([0.0]), [1.0]).item() == pytest.approx(16.1181, abs=1e-4)


def test_bce_soft_target():
    p, y = 0.3, 0.6
    expected = -(y * math.log(p) + (1 - y) * math.log(1 - p))
    assert bce(Tensor([p]), [y]).item() == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("p,y", [([1.2], [1.0]), ([0.5], [-0.1]), ([0.5], [1.5])])
def test_bce_domain_errors(p, y):
    with pytest.raises(DomainError):
        bce(Tensor(p), y)


def test_bce_shape_mismatch():
    with pytest.raises(DimensionError):
        bce(Tensor([0.5, 0.5]), [1.0])


@settings(max_examples=60, deadline=None)
@given(p=st.floats(0, 1), y=st.sampled_from([0.0, 1.0]))
def test_bce_nonnegative_and_minimised_at_target(p, y):
    val = bce(Tensor([p]), [y]).item()
    assert val >= 0
    assert val >= bce(Tensor([y]), [y]).item()


def test_bce_per_sample():
    p = Tensor([0.2, 0.7, 0.9])
    y = [0.0, 1.0, 0.5]
    per = bce(p, y, per_sample=True).data
    assert per.shape == (3,)
    for i in range(3):
        assert per[i] == pytest.approx(loop_bce(p.data[i], y[i]), abs=1e-12)
    assert bce(p, y).item() == pytest.approx(per.mean(), abs=1e-15)


# -- voxel_ce ---------------------------------------------------------------------

def test_voxel_ce_perfect():
    s = (np.random.default_rng(0).random((4, 4, 4)) > 0.5).astype(float)
    assert voxel_ce(Tensor(s), s).item() <= 1e-6


def test_voxel_ce_uniform_half_is_ln2():
    s = (np.random.default_rng(1).random((4, 4, 4)) > 0.3).astype(float)
    assert voxel_ce(Tensor(np.full(s.shape, 0.5)), s).item() == pytest.approx(math.log(2), abs=1e-12)


def test_voxel_ce_matches_scalar_loop():
    r = np.random.default_rng(2)
    p, s = r.random((4, 4, 4)), r.random((4, 4, 4))
    assert abs(voxel_ce(Tensor(p), s).item() - loop_bce(p, s)) < 1e-12


def test_voxel_ce_shape_mismatch():
    with pytest.raises(DimensionError):
        voxel_ce(Tensor(np.full((2, 2, 2), 0.5)), np.zeros((2, 2, 3)))


# -- dice_loss ----------------------------------------------------------------------

def test_dice_loss_perfect_overlap():
    assert dice_loss(Tensor(np.ones(8)), np.ones(8)).item() == pytest.approx(0.0, abs=1e-15)


def test_dice_loss_both_empty():
    assert dice_loss(Tensor(np.zeros(8)), np.zeros(8)).item() == 0.0


def test_dice_loss_prediction_without_target():
    assert dice_loss(Tensor(np.ones(8)), np.zeros(8)).item() == pytest.approx(1 - 1 / 9, abs=1e-15)


def test_dice_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        dice_loss(Tensor(np.ones(8)), np.ones(7))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dice_loss_range(seed):
    r = np.random.default_rng(seed)
    val = dice_loss(Tensor(r.random(27)), (r.random(27) > r.random()).astype(float)).item()
    assert 0.0 <= val < 1.0


def test_dice_loss_per_sample_matches_individual():
    r = np.random.default_rng(3)
    p, s = r.random((3, 2, 2, 2)), (r.random((3, 2, 2, 2)) > 0.5).astype(float)
    per = dice_loss(Tensor(p), s, per_sample=True).data
    for i in range(3):
        assert per[i] == pytest.approx(dice_loss(Tensor(p[i]), s[i]).item(), abs=1e-15)


# -- detection_loss ------------------------------------------------------------------

def test_detection_perfect_hard_prediction():
    s = (np.random.default_rng(4).random((4, 4, 4)) > 0.5).astype(float)
    assert detection_loss(Tensor(s), s).item() <= 1e-6


def test_detection_is_sum_of_parts():
    r = np.random.default_rng(5)
    p, s = r.random((4, 4, 4)), (r.random((4, 4, 4)) > 0.5).astype(float)
    total = detection_loss(Tensor(p), s).item()
    assert total == voxel_ce(Tensor(p), s).item() + dice_loss(Tensor(p), s).item()


def test_detection_weights():
    r = np.random.default_rng(6)
    p, s = r.random(10), (r.random(10) > 0.5).astype(float)
    val = detection_loss(Tensor(p), s, ce_weight=0.5, dice_weight=2.0).item()
    ref = 0.5 * voxel_ce(Tensor(p), s).item() + 2.0 * dice_loss(Tensor(p), s).item()
    assert val == pytest.approx(ref, abs=1e-14)


def test_detection_gradient_vs_finite_differences():
    r = np.random.default_rng(7)
    s = (r.random((3, 3, 3)) > 0.5).astype(float)
    p = 0.1 + 0.8 * r.random((3, 3, 3))
    assert grad_check(lambda t: detection_loss(t, s), p) < 1e-4


def test_bce_gradient_soft_targets():
    r = np.random.default_rng(8)
    y = r.random(6)
    assert grad_check(lambda t: bce(t, y), 0.05 + 0.9 * r.random(6)) < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_detection_loss_decreases_toward_target(seed):
    r = np.random.default_rng(seed)
    s = (r.random((4, 4, 4)) > 0.5).astype(float)
    p0 = r.random((4, 4, 4))
    vals = [detection_loss(Tensor((1 - a) * p0 + a * s), s).item()
            for a in np.linspace(0.0, 1.0, 5)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
