import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cspo.errors import EmptyEnsemble, LengthMismatch, ZeroGamma
from cspo.objective import LossKind, compute_loss, cspo_loss, hetero_exp, hetero_raw, hetero_reg, mse

f64 = torch.float64


def t(*values):
    return torch.tensor(values, dtype=f64)


def test_mse_examples():
    assert mse(t(1.0, 2.0), t(1.0, 2.0)).item() == 0.0
    assert mse(t(1.0, -1.0), t(0.0, 0.0)).item() == 1.0
    r, r_hat = t(0.3, -0.2, 1.5), t(0.1, 0.4, 1.0)
    scaled = mse(r_hat + 3.0 * (r - r_hat), r_hat).item()
    assert scaled == pytest.approx(9.0 * mse(r, r_hat).item(), rel=1e-14)
    with pytest.raises(LengthMismatch):
        mse(t(1.0, 2.0), t(1.0))


def test_hetero_raw_examples():
    r, r_hat = t(0.5, 1.0), t(0.0, 0.0)
    assert hetero_raw(r, r_hat, t(1.0, 1.0)).item() == mse(r, r_hat).item()
    assert hetero_raw(t(math.sqrt(2)), t(0.0), t(2.0)).item() == pytest.approx(1.0, rel=1e-15)
    assert hetero_raw(t(1.0), t(0.0), t(-1.0)).item() == -1.0
    with pytest.raises(ZeroGamma):
        hetero_raw(t(1.0), t(0.0), t(0.0))
    with pytest.raises(LengthMismatch):
        hetero_raw(t(1.0, 2.0), t(0.0, 0.0), t(1.0))


def test_hetero_exp_examples():
    r, r_hat = t(0.5, 1.0), t(0.0, 0.0)
    assert hetero_exp(r, r_hat, t(0.0, 0.0)).item() == mse(r, r_hat).item()
    assert hetero_exp(t(1.0), t(0.0), t(math.log(2))).item() == pytest.approx(0.5, rel=1e-15)
    losses = [hetero_exp(t(1.0), t(0.0), t(g)).item() for g in (1.0, 10.0, 50.0)]
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-20


def test_hetero_reg_examples():
    r, r_hat = t(0.5, 1.0), t(0.0, 0.0)
    assert hetero_reg(r, r_hat, t(0.0, 0.0)).item() == mse(r, r_hat).item()
    assert hetero_reg(t(1.0), t(0.0), t(math.log(2))).item() == pytest.approx(0.5 + math.log(2), rel=1e-15)
    assert 0.5 + math.log(2) == pytest.approx(1.19315, abs=5e-6)
    # residual^2 = e: stationary point gamma = 1, value 2
    res = t(math.sqrt(math.e))
    assert hetero_reg(res, t(0.0), t(1.0)).item() == pytest.approx(2.0, rel=1e-15)
    for g in (0.5, 0.9, 1.1, 2.0):
        assert hetero_reg(res, t(0.0), t(g)).item() > 2.0


def test_cspo_loss_examples():
    value = cspo_loss(t(1.0), t(0.0), [t(0.0), t(math.log(2))]).item()
    assert value == pytest.approx((1 + 0.5 + math.log(2)) / 2, rel=1e-15)
    assert value == pytest.approx(1.09657, abs=5e-6)
    r, r_hat, g = t(0.3, -0.7), t(0.1, 0.2), t(0.4, -0.2)
    assert cspo_loss(r, r_hat, [g]).item() == hetero_reg(r, r_hat, g).item()
    with pytest.raises(EmptyEnsemble):
        cspo_loss(r, r_hat, [])
    with pytest.raises(LengthMismatch):
        cspo_loss(r, r_hat, [t(0.0)])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_reduction_chain(k_s, H, seed):
    g = np.random.default_rng(seed)
    r, r_hat = torch.as_tensor(g.normal(size=k_s)), torch.as_tensor(g.normal(size=k_s))
    zero = torch.zeros(k_s, dtype=f64)
    ref = mse(r, r_hat).item()
    for value in (cspo_loss(r, r_hat, [zero] * H), hetero_reg(r, r_hat, zero), hetero_exp(r, r_hat, zero)):
        assert abs(value.item() - ref) <= 1e-12 * abs(ref)


def test_batched_inputs_average_uniformly():
    g = np.random.default_rng(0)
    r, r_hat, gam = (torch.as_tensor(g.normal(size=(5, 3))) for _ in range(3))
    per_day = torch.stack([cspo_loss(r[i], r_hat[i], [gam[i]]) for i in range(5)])
    torch.testing.assert_close(cspo_loss(r, r_hat, [gam]), per_day.mean(), rtol=1e-14, atol=0)


def test_gradients_match_finite_differences():
    g = np.random.default_rng(1)
    r = torch.as_tensor(g.normal(size=4))
    r_hat = torch.as_tensor(g.normal(size=4)).requires_grad_(True)
    gammas = [torch.as_tensor(g.normal(size=4)).requires_grad_(True) for _ in range(3)]
    cspo_loss(r, r_hat, gammas).backward()
    eps = 1e-6
    for tensor in [r_hat, *gammas]:
        for i in range(4):
            old = tensor.data[i].item()
            tensor.data[i] = old + eps
            up = cspo_loss(r, r_hat, gammas).item()
            tensor.data[i] = old - eps
            down = cspo_loss(r, r_hat, gammas).item()
            tensor.data[i] = old
            numeric = (up - down) / (2 * eps)
            assert tensor.grad[i].item() == pytest.approx(numeric, rel=1e-6, abs=1e-10)


def descend(loss_fn, steps, lr=0.1, start=0.0):
    gamma = torch.tensor([start], dtype=f64, requires_grad=True)
    path = [gamma.item()]
    for _ in range(steps):
        (grad,) = torch.autograd.grad(loss_fn(gamma), gamma)
        with torch.no_grad():
            gamma -= lr * grad
        path.append(gamma.item())
    return path


def test_gamma_descent_reaches_log_residual():
    e = 1.7
    r, r_hat = t(e), t(0.0)
    path = descend(lambda g: cspo_loss(r, r_hat, [g]), 2000)
    assert abs(path[-1] - math.log(e**2)) < 1e-4
    assert hetero_reg(r, r_hat, t(path[-1])).item() == pytest.approx(1 + math.log(e**2), rel=1e-8)


def test_gamma_descent_on_hetero_exp_keeps_growing():
    r, r_hat = t(0.8), t(0.0)
    path = descend(lambda g: hetero_exp(r, r_hat, g), 1000)
    assert all(b > a for a, b in zip(path, path[1:]))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0, 5), st.floats(0.01, 5))
def test_loss_increases_with_residual(gamma, small, extra):
    g = t(gamma)
    big = small + extra
    a, b = cspo_loss(t(small), t(0.0), [g]).item(), cspo_loss(t(-big), t(0.0), [g]).item()
    assert b > a


def test_compute_loss_dispatch():
    r, r_hat = t(1.0, 0.0), t(0.0, 0.5)
    g1, g2 = t(0.2, -0.1), t(0.5, 0.3)
    assert compute_loss("mse", r, r_hat).item() == mse(r, r_hat).item()
    assert compute_loss(LossKind.HETERO_RAW, r, r_hat, [g1, g2]).item() == hetero_raw(r, r_hat, g1).item()
    assert compute_loss("hetero_exp", r, r_hat, [g1, g2]).item() == hetero_exp(r, r_hat, g1).item()
    assert compute_loss("hetero_reg", r, r_hat, [g1, g2]).item() == hetero_reg(r, r_hat, g1).item()
    assert compute_loss("cspo_final", r, r_hat, [g1, g2]).item() == cspo_loss(r, r_hat, [g1, g2]).item()
    with pytest.raises(EmptyEnsemble):
        compute_loss("hetero_reg", r, r_hat)
    with pytest.raises(ValueError):
        compute_loss("huber", r, r_hat)
