"""Segmentation objective: weighted binary cross-entropy plus soft Dice."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import LOG_EPS, Tensor, ShapeError, add, clamp, is_checked, log, mul, scale, sub


@dataclass
class LossConfig:
    alpha: float = 0.5
    beta: float = 0.5
    epsilon: float = 1e-6
    clamp_eps: float = LOG_EPS
    # 2 gives the Sorensen-Dice form; 1 reproduces the factor-free variant
    dice_numerator_factor: float = 2.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be nonnegative")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _check_pair(p: Tensor, y: Tensor, name: str) -> None:
    if p.shape != y.shape:
        raise ShapeError(f"{name}: prediction shape {p.shape} != target shape {y.shape}")
    if is_checked() and not np.isin(y.data, (0, 1)).all():
        bad = np.unique(y.data[~np.isin(y.data, (0, 1))])[:5]
        raise ValueError(f"{name}: target must be binary, found values {bad.tolist()}")


def bce_loss(p: Tensor, y: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """Mean over pixels of -[y log p + (1 - y) log(1 - p)], p clamped away from 0 and 1."""
    cfg = cfg or LossConfig()
    _check_pair(p, y, "bce_loss")
    pc = clamp(p, cfg.clamp_eps, 1 - cfg.clamp_eps)
    ll = add(mul(y, log(pc)), mul(sub(1.0, y), log(sub(1.0, pc))))
    return scale(ll.mean(), -1.0)


def dice_loss(p: Tensor, y: Tensor, cfg: LossConfig | None = None) -> Tensor:
    """1 - (k * sum(y p) + eps) / (sum(y) + sum(p) + eps), per image, averaged over the batch."""
    cfg = cfg or LossConfig()
    _check_pair(p, y, "dice_loss")
    axes = tuple(range(1, p.ndim)) if p.ndim > 1 else None
    inter = mul(p, y).sum(axis=axes)
    total = add(y.sum(axis=axes), p.sum(axis=axes))
    ratio = add(scale(inter, cfg.dice_numerator_factor), cfg.epsilon) / add(total, cfg.epsilon)
    return sub(1.0, ratio).mean()


def combined_loss(p: Tensor, y: Tensor, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return add(scale(bce_loss(p, y, cfg), cfg.alpha), scale(dice_loss(p, y, cfg), cfg.beta))
