"""Image quality metrics: PSNR, SSIM (with gradient) and the AVG summary."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch, TooSmall

PSNR_CAP = 99.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images report ``PSNR_CAP``."""
    m = mse(a, b)
    if m == 0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(m))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two leading axes of (H, W, C)."""
    k = len(g)
    y = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(y, k, axis=1) @ g


def _filter_valid_adjoint(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Transpose of ``_filter_valid`` (a 'full' convolution)."""
    k = len(g)
    p = np.pad(y, ((k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    gr = g[::-1]
    z = sliding_window_view(p, k, axis=0) @ gr
    return sliding_window_view(z, k, axis=1) @ gr


def _as_hwc(a):
    return a[..., None] if a.ndim == 2 else a


def _ssim_parts(a, b):
    a, b = _check_pair(a, b)
    a, b = _as_hwc(a), _as_hwc(b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise TooSmall(f"SSIM needs images at least {SSIM_WINDOW} px on each side")
    g = gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    e_aa = _filter_valid(a * a, g)
    e_bb = _filter_valid(b * b, g)
    e_ab = _filter_valid(a * b, g)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    S = (A1 * A2) / (B1 * B2)
    return a, b, g, mu_a, mu_b, A1, A2, B1, B2, S


def ssim(a, b) -> float:
    """Mean SSIM over the valid region, 11x11 Gaussian window (sigma 1.5), data range 1."""
    return float(np.mean(_ssim_parts(a, b)[-1]))


def ssim_with_grad(a, b) -> tuple[float, np.ndarray]:
    """SSIM(a, b) and its gradient with respect to ``a``."""
    squeeze = np.asarray(a).ndim == 2
    a, b, g, mu_a, mu_b, A1, A2, B1, B2, S = _ssim_parts(a, b)
    dS = 1.0 / S.size
    denom = B1 * B2
    g_mu = dS * ((2 * mu_b * A2 - 2 * mu_b * A1) / denom - S * (2 * mu_a / B1 - 2 * mu_a / B2))
    g_eaa = dS * (-S / B2)
    g_eab = dS * (2 * A1 / denom)
    grad = (
        _filter_valid_adjoint(g_mu, g)
        + 2 * a * _filter_valid_adjoint(g_eaa, g)
        + b * _filter_valid_adjoint(g_eab, g)
    )
    return float(np.mean(S)), (grad[..., 0] if squeeze else grad)


class AvgMetric(NamedTuple):
    value: float
    partial: bool


def avg_metric(psnr_db: float, ssim_value: float, lpips: float | None = None) -> AvgMetric:
    """Geometric mean of MSE, sqrt(1 - SSIM) and LPIPS.

    Without LPIPS the two-factor geometric mean is returned and flagged
    ``partial``; such values are not comparable with three-factor ones.
    """
    m = 10.0 ** (-psnr_db / 10.0)
    s = math.sqrt(max(0.0, 1.0 - ssim_value))
    if lpips is None:
        return AvgMetric(math.sqrt(m * s), True)
    return AvgMetric((m * s * lpips) ** (1.0 / 3.0), False)
