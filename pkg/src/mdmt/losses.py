"""Classification and ROI-detection losses.

Both losses accept soft targets in ``[0, 1]`` so that propagated
probabilities can be used directly as labels.  Inputs with a leading batch
axis can be reduced per sample with ``per_sample=True``; otherwise every
element is reduced into one scalar.
"""
from __future__ import annotations

import numpy as np

from .exceptions import DimensionError, DomainError
from .tensor import Tensor, as_tensor, clamp, log

PROB_CLAMP = 1e-7


def _target(y) -> np.ndarray:
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    if np.any((y < 0) | (y > 1)):
        raise DomainError("targets must lie in [0, 1]")
    return y


def _pred(p) -> Tensor:
    p = as_tensor(p)
    if np.any((p.data < 0) | (p.data > 1)):
        raise DomainError("predictions must lie in [0, 1]")
    return p


def _reduce(t: Tensor, per_sample: bool) -> Tensor:
    if not per_sample:
        return t.mean()
    if t.ndim < 2:
        return t
    return t.mean(axis=tuple(range(1, t.ndim)))


def bce(y_hat, y, per_sample: bool = False) -> Tensor:
    """Binary cross entropy ``-[y ln p + (1-y) ln(1-p)]``, averaged.

    ``p`` is clamped to ``[1e-7, 1 - 1e-7]`` before the logs.
    """
    p = _pred(y_hat)
    t = _target(y)
    if t.shape != p.shape:
        raise DimensionError(f"bce: prediction {p.shape} vs target {t.shape}")
    p = clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = Tensor(t)
    elem = -(t * log(p) + (1.0 - t) * log(1.0 - p))
    return _reduce(elem, per_sample)


def voxel_ce(s_hat, s, per_sample: bool = False) -> Tensor:
    """Mean voxel-wise binary cross entropy between a soft map and a mask."""
    p = _pred(s_hat)
    t = _target(s)
    if t.shape != p.shape:
        raise DimensionError(f"voxel_ce: prediction {p.shape} vs target {t.shape}")
    return bce(p, t, per_sample=per_sample)


def dice_loss(s_hat, s, eps: float = 1.0, per_sample: bool = False) -> Tensor:
    """Smoothed soft Dice loss ``1 - (2 sum(p*t) + eps) / (sum(p) + sum(t) + eps)``."""
    p = _pred(s_hat)
    t = _target(s)
    if t.shape != p.shape:
        raise DimensionError(f"dice_loss: prediction {p.shape} vs target {t.shape}")
    t = Tensor(t)
    if per_sample and p.ndim >= 2:
        axes = tuple(range(1, p.ndim))
        inter = (p * t).sum(axis=axes)
        denom = p.sum(axis=axes) + t.sum(axis=axes) + eps
    else:
        inter = (p * t).sum()
        denom = p.sum() + t.sum() + eps
    return 1.0 - (2.0 * inter + eps) / denom


def detection_loss(s_hat, s, eps: float = 1.0, ce_weight: float = 1.0,
                   dice_weight: float = 1.0, per_sample: bool = False) -> Tensor:
    """Voxel cross entropy plus soft Dice (unit weights by default)."""
    ce = voxel_ce(s_hat, s, per_sample=per_sample)
    dl = dice_loss(s_hat, s, eps=eps, per_sample=per_sample)
    if ce_weight == 1.0 and dice_weight == 1.0:
        return ce + dl
    return ce * ce_weight + dl * dice_weight
