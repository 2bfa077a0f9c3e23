"""Regression objectives, from plain MSE up to the ensembled volatility-aware loss.

Every loss takes ``[..., k_s]`` tensors; the cross-sectional mean is taken per
time step and steps in a batch are averaged uniformly, which for a fixed
``k_s`` is the mean over all elements.
"""
from __future__ import annotations

import enum
from typing import Sequence

import torch

from .errors import EmptyEnsemble, LengthMismatch, ZeroGamma


class LossKind(str, enum.Enum):
    MSE = "mse"
    HETERO_RAW = "hetero_raw"
    HETERO_EXP = "hetero_exp"
    HETERO_REG = "hetero_reg"
    CSPO_FINAL = "cspo_final"

    @property
    def uses_gamma(self) -> bool:
        return self is not LossKind.MSE


def _as_tensor(x, like=None):
    if torch.is_tensor(x):
        return x
    dtype = like.dtype if torch.is_tensor(like) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _residual_sq(r, r_hat):
    r_hat = _as_tensor(r_hat, r)
    r = _as_tensor(r, r_hat)
    if r.shape != r_hat.shape:
        raise LengthMismatch(f"targets {tuple(r.shape)} vs predictions {tuple(r_hat.shape)}")
    return (r - r_hat) ** 2


def _check_gamma(gamma, res2):
    gamma = _as_tensor(gamma, res2)
    if gamma.shape != res2.shape:
        raise LengthMismatch(f"gamma {tuple(gamma.shape)} vs residual {tuple(res2.shape)}")
    return gamma


def mse(r, r_hat):
    return _residual_sq(r, r_hat).mean()


def hetero_raw(r, r_hat, gamma):
    """Squared error divided by gamma directly; unbounded below once gamma < 0."""
    res2 = _residual_sq(r, r_hat)
    gamma = _check_gamma(gamma, res2)
    if (gamma == 0).any():
        raise ZeroGamma("gamma must be nonzero for the raw heteroscedastic loss")
    return (res2 / gamma).mean()


def hetero_exp(r, r_hat, gamma):
    res2 = _residual_sq(r, r_hat)
    return (res2 / torch.exp(_check_gamma(gamma, res2))).mean()


def hetero_reg(r, r_hat, gamma):
    res2 = _residual_sq(r, r_hat)
    gamma = _check_gamma(gamma, res2)
    return (res2 / torch.exp(gamma) + gamma).mean()


def cspo_loss(r, r_hat, gammas: Sequence):
    """Regularized loss averaged over ``H`` independent pseudo-volatility estimates."""
    if len(gammas) == 0:
        raise EmptyEnsemble("cspo_loss needs at least one gamma")
    res2 = _residual_sq(r, r_hat)
    total = 0.0
    for gamma in gammas:
        gamma = _check_gamma(gamma, res2)
        total = total + (res2 / torch.exp(gamma) + gamma).mean()
    return total / len(gammas)


def compute_loss(kind: LossKind | str, r, r_hat, gammas: Sequence = ()):
    """Dispatch on ``kind``; single-gamma losses read the first ensemble member."""
    kind = LossKind(kind)
    if kind is LossKind.MSE:
        return mse(r, r_hat)
    if len(gammas) == 0:
        raise EmptyEnsemble(f"{kind.value} needs pseudo-volatility estimates")
    if kind is LossKind.HETERO_RAW:
        return hetero_raw(r, r_hat, gammas[0])
    if kind is LossKind.HETERO_EXP:
        return hetero_exp(r, r_hat, gammas[0])
    if kind is LossKind.HETERO_REG:
        return hetero_reg(r, r_hat, gammas[0])
    return cspo_loss(r, r_hat, gammas)
