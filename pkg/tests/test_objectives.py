import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from viciousbench.errors import ArgumentError
from viciousbench.objectives import (TradeoffWeights, accuracy_binary, accuracy_categorical,
                                     categorical_ce, combined_loss, huber, reconstruction_loss, ssim,
                                     ssim_per_image, weighted_bce)

unit = st.floats(0, 1, allow_nan=False)


def _fd_check(fn, x, rel=1e-3, h=1e-6, picks=8):
    """Compare autograd with central differences at a few coordinates of ``x``."""
    x = x.detach().clone().double().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.reshape(-1)
    flat = x.detach().reshape(-1)
    rng = np.random.default_rng(0)
    for i in rng.choice(flat.numel(), size=min(picks, flat.numel()), replace=False):
        up, down = flat.clone(), flat.clone()
        up[i] += h
        down[i] -= h
        fd = (fn(up.reshape(x.shape)).item() - fn(down.reshape(x.shape)).item()) / (2 * h)
        an = grad[i].item()
        assert abs(fd - an) <= rel * max(abs(fd), abs(an), 1e-6), (i, fd, an)


def test_ce_examples():
    assert categorical_ce(torch.tensor([0.0, 0.0]), torch.tensor(0)).item() == pytest.approx(math.log(2))
    assert categorical_ce(torch.tensor([100.0, -100.0]), torch.tensor(0)).item() == pytest.approx(0, abs=1e-12)


def test_ce_matches_one_hot_oracle(rng):
    z = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, 6)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    oracle = -np.mean([np.sum(np.eye(5)[y[i]] * np.log(p[i])) for i in range(6)])
    assert categorical_ce(torch.tensor(z), torch.tensor(y)).item() == pytest.approx(oracle, rel=1e-12)


def test_bce_examples():
    assert weighted_bce(torch.tensor([0.0]), torch.tensor([1.0]), [1.0]).item() == pytest.approx(math.log(2))
    pos = weighted_bce(torch.tensor([0.0]), torch.tensor([1.0]), [3.0]).item()
    neg = weighted_bce(torch.tensor([0.0]), torch.tensor([0.0]), [3.0]).item()
    assert pos == pytest.approx(3 * neg)


def test_bce_matches_scalar_oracle(rng):
    z = rng.normal(size=(4, 3)) * 3
    y = rng.integers(0, 2, (4, 3))
    eta = np.array([0.5, 2.0, 1.5])
    total = 0.0
    for i in range(4):
        for j in range(3):
            s = 1 / (1 + math.exp(-z[i, j]))
            total += eta[j] * y[i, j] * math.log(s) + (1 - y[i, j]) * math.log(1 - s)
    got = weighted_bce(torch.tensor(z), torch.tensor(y), eta).item()
    assert got == pytest.approx(-total / 12, rel=1e-10)


def test_bce_is_floored():
    assert math.isfinite(weighted_bce(torch.tensor([-1e4]), torch.tensor([1.0]), [1.0]).item())


def test_ssim_identical_is_one(rng):
    x = rng.random((16, 16, 1))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_images():
    x = np.full((12, 12, 1), 0.4)
    assert ssim(x, x.copy()) == pytest.approx(1.0, abs=1e-12)


def test_ssim_half_black_vs_inverse():
    x = np.zeros((16, 16, 1))
    x[:, 8:] = 1.0
    assert ssim(x, 1 - x) < 0.5


def test_ssim_small_image_window_shrinks(rng):
    a, b = rng.random((5, 5, 1)), rng.random((5, 5, 1))
    assert 0.0 <= ssim(a, b) <= 1.0


@given(arrays(np.float64, (8, 8, 1), elements=unit), arrays(np.float64, (8, 8, 1), elements=unit))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert 0.0 <= s <= 1.0
    assert s == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(ArgumentError):
        ssim_per_image(torch.zeros(1, 1, 8, 8), torch.zeros(1, 1, 8, 9))


def test_huber_piecewise_values():
    x = np.zeros((4, 4))
    assert huber(x, x, 1.0) == 0.0
    assert huber(x + 0.5, x, 1.0) == 0.125
    assert huber(x + 2.0, x, 1.0) == 1.5
    t = torch.zeros(3, 3, dtype=torch.float64)
    assert huber(t + 2.0, t, 1.0).item() == 1.5


def test_huber_rejects_bad_delta():
    with pytest.raises(ArgumentError):
        huber(np.zeros(2), np.ones(2), 0.0)


@given(st.floats(0.05, 5.0))
def test_huber_smooth_at_delta(delta):
    h = 1e-7 * delta
    left = huber(np.array([delta - h]), np.zeros(1), delta)
    right = huber(np.array([delta + h]), np.zeros(1), delta)
    assert abs(left - right) <= 3 * delta * h
    # matching slopes on both sides of the knee
    slope_l = (huber(np.array([delta]), np.zeros(1), delta) - left) / h
    slope_r = (right - huber(np.array([delta]), np.zeros(1), delta)) / h
    assert slope_l == pytest.approx(delta, rel=1e-4)
    assert slope_r == pytest.approx(delta, rel=1e-4)


@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), arrays(np.float64, 6, elements=st.floats(-5, 5)))
def test_huber_torch_matches_numpy(a, b):
    assert huber(torch.tensor(a), torch.tensor(b)).item() == pytest.approx(huber(a, b), rel=1e-12, abs=1e-15)


def test_reconstruction_loss_components(rng):
    x = torch.tensor(rng.random((3, 1, 12, 12)))
    xr = torch.tensor(rng.random((3, 1, 12, 12)))
    assert reconstruction_loss(x, x, 2.0, 3.0).item() == pytest.approx(0.0, abs=1e-12)
    only_ssim = reconstruction_loss(xr, x, 1.5, 0.0).item()
    assert only_ssim == pytest.approx(1.5 * (1 - ssim_per_image(xr, x).mean().item()), rel=1e-12)
    only_huber = reconstruction_loss(xr, x, 0.0, 1.0, 1.0).item()
    assert only_huber == pytest.approx(huber(xr.numpy(), x.numpy(), 1.0), rel=1e-12)


def test_combined_loss():
    w = TradeoffWeights(1.0, 1.0)
    assert combined_loss(0.3, 0.2, w) == pytest.approx(0.5)
    assert combined_loss(0.3, 0.2, TradeoffWeights.from_ratio(0)) == pytest.approx(0.3)
    assert combined_loss(0.3, 0.2, TradeoffWeights.from_ratio(math.inf)) == pytest.approx(0.2)


def test_tradeoff_encoding():
    assert TradeoffWeights.from_ratio(3).ratio == 3
    assert (TradeoffWeights.from_ratio(0).beta_C, TradeoffWeights.from_ratio(0).beta_R) == (1, 0)
    assert TradeoffWeights.from_ratio(math.inf).ratio == math.inf
    with pytest.raises(ArgumentError):
        TradeoffWeights(0, 0)
    with pytest.raises(ArgumentError):
        TradeoffWeights.from_ratio(-1)
    with pytest.raises(ArgumentError):
        TradeoffWeights(delta=0)


def test_accuracy_examples():
    assert accuracy_categorical(np.eye(4), [0, 1, 2, 3]) == 100.0
    assert accuracy_categorical(np.eye(4), [0, 1, 2, 0]) == 75.0
    labels = np.tile(np.arange(10), 10)
    assert accuracy_categorical(np.tile([1.0] + [0] * 9, (100, 1)), labels) == pytest.approx(10.0)
    assert accuracy_binary(np.full((5, 3), 5.0), np.ones((5, 3)), [0, 0, 0]) == 100.0
    balanced = np.array([[0], [1]] * 5)
    assert accuracy_binary(np.full((10, 1), 1.0), balanced, [0.0]) == 50.0


def test_accuracy_binary_enumeration():
    out = np.array([[0.9, 0.2], [0.3, 0.7], [0.6, 0.6], [0.1, 0.1]])
    y = np.array([[1, 0], [1, 1], [0, 1], [0, 0]])
    # attribute 0: right on rows 0 and 3; attribute 1: right on all 4
    assert accuracy_binary(out, y, [0.5, 0.5]) == pytest.approx((2 / 4 + 4 / 4) / 2 * 100)


def test_loss_gradients_match_finite_differences(rng):
    y = torch.tensor(rng.integers(0, 5, 4))
    yb = torch.tensor(rng.integers(0, 2, (4, 3)), dtype=torch.float64)
    x = torch.tensor(rng.random((2, 1, 12, 12)))
    _fd_check(lambda z: categorical_ce(z, y), torch.tensor(rng.normal(size=(4, 5))))
    _fd_check(lambda z: weighted_bce(z, yb, [0.5, 1.0, 2.0]), torch.tensor(rng.normal(size=(4, 3))))
    start = (x + 0.2 * torch.tensor(rng.normal(size=x.shape))).clamp(0, 1)
    _fd_check(lambda r: 1 - ssim_per_image(r, x).mean(), start)
    # keep errors away from the Huber knee, where the function is only C1
    _fd_check(lambda r: huber(r, x, 0.1), x + 0.05 * torch.tensor(rng.choice([-1.0, 1.0], size=x.shape)) *
              torch.tensor(rng.uniform(0.3, 3.0, size=x.shape)))
    _fd_check(lambda r: reconstruction_loss(r, x), start)
