"""Combined perceptual training loss and its gradient with respect to the prediction.

``total = 0.3 * L1 + 0.2 * (1 - SSIM) + 0.1 * L2 + 0.4 * (1 - MS-SSIM)``

Every function returns ``(value, grad)`` where ``grad`` has the prediction's
shape. Values are batch means, so a ``(B, C, H, W)`` batch gives the average
of the per-patch losses and the gradient of that average.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .errors import ValidationError


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 0.3
    w_ssim: float = 0.2
    w_l2: float = 0.1
    w_msssim: float = 0.4

    def __post_init__(self):
        values = self.as_tuple()
        if any(v < 0 for v in values):
            raise ValidationError(f"loss weights must be nonnegative, got {values}")
        if math.fsum(values) != 1.0:
            raise ValidationError(f"loss weights must sum to 1, got {math.fsum(values)!r}")

    def as_tuple(self):
        return (self.w_l1, self.w_ssim, self.w_l2, self.w_msssim)


@dataclass
class LossValue:
    total: float
    components: dict
    grad: np.ndarray = field(repr=False)


def _check(pred, target):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValidationError(f"prediction {pred.shape} and target {target.shape} differ in shape")
    return pred.astype(np.float64, copy=False), target.astype(np.float64, copy=False)


def l1_loss(pred, target):
    """Mean absolute error; subgradient uses sign(0) = 0."""
    p, t = _check(pred, target)
    d = p - t
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def l2_loss(pred, target):
    p, t = _check(pred, target)
    d = p - t
    return float(np.mean(d * d)), 2.0 * d / d.size


def ssim_loss(pred, target, params=None):
    p, t = _check(pred, target)
    value, grad = metrics.ssim_and_grad(p, t, params)
    return 1.0 - value, -grad


def msssim_loss(pred, target, params=None):
    p, t = _check(pred, target)
    value, grad = metrics.ms_ssim_and_grad(p, t, params)
    return 1.0 - value, -grad


def combined_loss(pred, target, weights=None, ssim_params=None, msssim_params=None):
    """Weighted sum of the four components with the matching weighted gradient.

    The two structural terms share their full-resolution statistics.
    """
    weights = weights or LossWeights()
    pred = np.asarray(pred)
    if pred.ndim not in (3, 4):
        raise ValidationError(f"expected (C, H, W) or (B, C, H, W) patches, got {pred.shape}")
    p, t = _check(pred, target)
    l1, g1 = l1_loss(p, t)
    l2, g2 = l2_loss(p, t)
    s, ms, g_struct = metrics.ssim_pair_and_grad(
        p, t, weights.w_ssim, weights.w_msssim, ssim_params, msssim_params)
    components = {"L1": l1, "SSIM": 1.0 - s, "L2": l2, "MSSSIM": 1.0 - ms}
    w = dict(zip(("L1", "SSIM", "L2", "MSSSIM"), weights.as_tuple()))
    total = 0.0
    for name, value in components.items():
        total += w[name] * value
    grad = w["L1"] * g1 + w["L2"] * g2 - g_struct
    return LossValue(total, components, grad)
