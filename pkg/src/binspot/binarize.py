"""Quantizers for weights and activations.

Forward binarization is a hard sign (with sign(0) = +1). Training needs a
gradient, so every binarizer here comes in three pieces:

* ``*_forward``   - the hard ±1 quantizer used in the real forward pass;
* ``*_backward``  - the surrogate gradient window applied in backprop;
* ``*_surrogate`` - the piecewise-linear function whose exact derivative is
  that window. Running the model on surrogates gives a genuinely
  differentiable loss, which is what finite-difference gradient checks
  probe.

The learnable binarizer shifts the sign threshold by ``theta`` in forward
and scales/clips the backward window by ``ratio``; its surrogate is
``ratio * clip(x - theta, -ratio, ratio)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

RATIO_MIN = 0.1
RATIO_MAX = 2.0


def sign_binarize(x: np.ndarray) -> np.ndarray:
    """Hard ±1 quantizer; sign(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def ste_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Straight-through window: pass gradient where |x| <= 1, zero outside."""
    grad_out = np.asarray(grad_out)
    x = np.asarray(x)
    if grad_out.shape != x.shape:
        raise ValueError(f"shape mismatch: {grad_out.shape} vs {x.shape}")
    return grad_out * (np.abs(x) <= 1.0)


def ste_surrogate(x: np.ndarray) -> np.ndarray:
    """clip(x, -1, 1): the function the straight-through window differentiates."""
    return np.clip(x, -1.0, 1.0)


def weight_scale(w: np.ndarray, axis=None) -> np.ndarray:
    """Per-group mean |w|, the magnitude restored to binarized weights.

    Default grouping is per output channel (one scale per first-axis row)
    for 2-D+ weights and a single scalar for 1-D weights. An all-zero group
    yields scale 0 (the unit's output degenerates to zero, not an error).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("weight_scale of an empty group")
    if axis is None:
        axis = tuple(range(1, w.ndim)) if w.ndim >= 2 else None
    return np.mean(np.abs(w), axis=axis)


@dataclass(frozen=True)
class DualScaleResult:
    """Two-scale activation binarization: ``b1 + alpha2 * b2_signs`` ≈ a."""

    b1: np.ndarray
    b2_signs: np.ndarray
    alpha2: float

    def reconstruct(self) -> np.ndarray:
        return self.b1 + self.alpha2 * self.b2_signs


def dual_scale_binarize(a: np.ndarray) -> DualScaleResult:
    """Binarize, then binarize the residual with its mean-|residual| scale.

    The second scale satisfies MSE(a, b1 + alpha2*b2) = MSE(a, b1) - alpha2²,
    so the dual-scale quantization error never exceeds the single-scale one.
    """
    a = np.asarray(a, dtype=np.float64)
    b1 = sign_binarize(a)
    e = a - b1
    alpha2 = float(np.mean(np.abs(e)))
    return DualScaleResult(b1=b1, b2_signs=sign_binarize(e), alpha2=alpha2)


@dataclass
class BinarizerParams:
    """Learnable threshold/ratio pair of one binarized unit.

    ``theta`` mean-shifts the forward sign; ``ratio`` is the backward pass
    gain and half-width of the gradient window, clamped to
    [RATIO_MIN, RATIO_MAX] after every optimizer step.
    """

    theta: float = 0.0
    ratio: float = 1.0

    def __post_init__(self):
        if self.ratio <= 0:
            raise ValueError("ratio must be positive")


def lpb_forward(x: np.ndarray, p: BinarizerParams) -> np.ndarray:
    """Threshold-shifted hard sign: +1 where x >= theta."""
    return np.where(np.asarray(x) >= p.theta, 1.0, -1.0)


def lpb_surrogate(x: np.ndarray, p: BinarizerParams) -> np.ndarray:
    """ratio * clip(x - theta, -ratio, ratio); reduces to ste_surrogate at
    theta=0, ratio=1."""
    r = p.ratio
    return r * np.clip(np.asarray(x) - p.theta, -r, r)


def lpb_backward(
    grad_out: np.ndarray, x: np.ndarray, p: BinarizerParams
) -> tuple[np.ndarray, float, float]:
    """Backward of the learnable binarizer: (grad_x, grad_theta, grad_ratio).

    These are the exact partials of the surrogate
    ``f = ratio * clip(x - theta, -ratio, ratio)``:

        df/dx     = ratio            inside the window |x - theta| <= ratio
        df/dtheta = -ratio           inside the window
        df/dratio = (x - theta)      inside the window,
                    2*ratio*sign(x - theta)  where the clip saturates

    Keeping the saturation term makes the triple self-consistent: all three
    gradients are finite-difference checkable against one function.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if grad_out.shape != x.shape:
        raise ValueError(f"shape mismatch: {grad_out.shape} vs {x.shape}")
    if p.ratio <= 0:
        raise ValueError("ratio must be positive")
    r = p.ratio
    centered = x - p.theta
    inside = np.abs(centered) <= r
    grad_x = r * grad_out * inside
    grad_theta = float(-r * np.sum(grad_out * inside))
    grad_ratio = float(
        np.sum(grad_out * np.where(inside, centered, 2.0 * r * np.sign(centered)))
    )
    return grad_x, grad_theta, grad_ratio


def clamp_ratio(p: BinarizerParams) -> None:
    p.ratio = float(min(max(p.ratio, RATIO_MIN), RATIO_MAX))
