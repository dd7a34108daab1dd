"""
Reconstruction losses: a pixel ℓ2 term, windowed SSIM and their weighted sum.

SSIM uses the usual 11x11 Gaussian window (sigma 1.5) applied as a valid
separable filter, with C1 = (0.01 L)^2 and C2 = (0.03 L)^2 for L = 1. The
gradient is derived analytically through the local moments, so training
never needs finite differences.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0
C1 = (SSIM_K1 * DATA_RANGE) ** 2
C2 = (SSIM_K2 * DATA_RANGE) ** 2
DEFAULT_MU = 5.0


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    offsets = np.arange(size) - size // 2
    taps = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    return taps / taps.sum()


_TAPS = gaussian_window()


def _filter_valid(x: np.ndarray) -> np.ndarray:
    """Valid separable Gaussian filtering over the last two axes."""
    rows = sliding_window_view(x, SSIM_WINDOW, axis=-1) @ _TAPS
    return sliding_window_view(rows, SSIM_WINDOW, axis=-2) @ _TAPS


def _filter_valid_adjoint(y: np.ndarray) -> np.ndarray:
    # the taps are symmetric, so the adjoint is the same filter over a zero-padded map
    m = SSIM_WINDOW - 1
    pad = [(0, 0)] * (y.ndim - 2) + [(m, m), (m, m)]
    return _filter_valid(np.pad(y, pad))


def _as_pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise InvalidInputError(f"images differ in shape: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise InvalidInputError(f"expected images with at least 2 dims, got shape {a.shape}")
    return a, b


@dataclass
class _Moments:
    a: np.ndarray
    b: np.ndarray
    mu_a: np.ndarray
    mu_b: np.ndarray
    num1: np.ndarray
    num2: np.ndarray
    den1: np.ndarray
    den2: np.ndarray
    smap: np.ndarray


def _moments(a, b) -> _Moments:
    a, b = _as_pair(a, b)
    h, w = a.shape[-2:]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise InvalidInputError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    mu_a = _filter_valid(a)
    mu_b = _filter_valid(b)
    var_a = _filter_valid(a * a) - mu_a ** 2
    var_b = _filter_valid(b * b) - mu_b ** 2
    cov = _filter_valid(a * b) - mu_a * mu_b
    num1 = 2.0 * mu_a * mu_b + C1
    num2 = 2.0 * cov + C2
    den1 = mu_a ** 2 + mu_b ** 2 + C1
    den2 = var_a + var_b + C2
    smap = (num1 * num2) / (den1 * den2)
    return _Moments(a, b, mu_a, mu_b, num1, num2, den1, den2, smap)


def ssim(a, b) -> float:
    """Mean local SSIM of two images (or equally shaped stacks of images) in [0, 1]."""
    return float(np.mean(_moments(a, b).smap))


def _grad_second(m: _Moments, first: np.ndarray, second: np.ndarray,
                 mu_first: np.ndarray, mu_second: np.ndarray) -> np.ndarray:
    s = m.smap
    count = s.size
    d_mu = s * (2.0 * mu_first / m.num1 - 2.0 * mu_first / m.num2
                - 2.0 * mu_second / m.den1 + 2.0 * mu_second / m.den2)
    d_sq = -s / m.den2
    d_cross = 2.0 * s / m.num2
    return (_filter_valid_adjoint(d_mu)
            + 2.0 * second * _filter_valid_adjoint(d_sq)
            + first * _filter_valid_adjoint(d_cross)) / count


def ssim_and_grads(a, b) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    SSIM together with its gradients.

    Returns:
        ``(value, d_value/d_a, d_value/d_b)``; gradients are float64 arrays
        shaped like the inputs.
    """
    m = _moments(a, b)
    db = _grad_second(m, m.a, m.b, m.mu_a, m.mu_b)
    da = _grad_second(m, m.b, m.a, m.mu_b, m.mu_a)
    return float(np.mean(m.smap)), da, db


def l2_loss(x, x_hat, normalization: str = "mean") -> float:
    return l2_loss_and_grad(x, x_hat, normalization)[0]


def l2_loss_and_grad(x, x_hat, normalization: str = "mean") -> Tuple[float, np.ndarray]:
    """Squared error, averaged per element by default; the gradient is with respect to ``x_hat``."""
    x, x_hat = _as_pair(x, x_hat)
    if normalization not in ("mean", "sum"):
        raise InvalidInputError(f"normalization must be 'mean' or 'sum', got {normalization!r}")
    diff = x_hat.astype(np.float64) - x.astype(np.float64)
    scale = 1.0 / diff.size if normalization == "mean" else 1.0
    return float(np.sum(diff * diff) * scale), 2.0 * scale * diff


@dataclass(frozen=True)
class LossValue:
    total: float
    l2_part: float
    ssim_part: float
    mu: float
    l2_weight: float = 1.0


def total_loss_and_grad(x, x_hat, mu: float = DEFAULT_MU, l2_weight: float = 1.0,
                        normalization: str = "mean") -> Tuple[LossValue, np.ndarray]:
    """
    ``l2_weight * l2 + mu * (1 - ssim) / 2`` and its gradient with respect to ``x_hat``.

    Setting ``mu = 0`` trains on the ℓ2 term alone and ``l2_weight = 0`` on
    SSIM alone; a disabled term is not evaluated.
    """
    x, x_hat = _as_pair(x, x_hat)
    grad = np.zeros(x_hat.shape, dtype=np.float64)
    l2 = 0.0
    ssim_part = 0.0
    if l2_weight != 0.0:
        l2, g_l2 = l2_loss_and_grad(x, x_hat, normalization)
        grad += l2_weight * g_l2
    if mu != 0.0:
        value, _, d_hat = ssim_and_grads(x, x_hat)
        ssim_part = (1.0 - value) / 2.0
        grad += (-mu / 2.0) * d_hat
    total = l2_weight * l2 + mu * ssim_part
    return LossValue(total=total, l2_part=l2, ssim_part=ssim_part, mu=mu, l2_weight=l2_weight), grad


def total_loss(x, x_hat, mu: float = DEFAULT_MU, l2_weight: float = 1.0,
               normalization: str = "mean") -> LossValue:
    return total_loss_and_grad(x, x_hat, mu, l2_weight, normalization)[0]
