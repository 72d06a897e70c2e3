"""Image-quality metrics for images in [0, 1]."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_pair(x, xhat):
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xhat.shape}")
    return x, xhat


def psnr(x, xhat) -> np.ndarray | float:
    """10 log10(1 / MSE) per image over the last two axes, capped at 99 dB."""
    x, xhat = _check_pair(x, xhat)
    mse = ((x - xhat) ** 2).mean(axis=(-2, -1))
    with np.errstate(divide="ignore"):
        val = np.where(mse > 0, 10 * np.log10(1.0 / np.maximum(mse, 1e-300)), PSNR_CAP)
    val = np.minimum(val, PSNR_CAP)
    return float(val) if val.ndim == 0 else val


def ssim(x, xhat, window: int = SSIM_WINDOW) -> np.ndarray | float:
    """Single-scale SSIM with a uniform window, stride 1, valid positions only.

    Local variances and covariance use the population (1/n) normalization.
    """
    x, xhat = _check_pair(x, xhat)
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ValueError(f"image {x.shape[-2:]} smaller than the {window}x{window} window")
    wx = sliding_window_view(x, (window, window), axis=(-2, -1))
    wy = sliding_window_view(xhat, (window, window), axis=(-2, -1))
    mx = wx.mean(axis=(-2, -1))
    my = wy.mean(axis=(-2, -1))
    vx = (wx * wx).mean(axis=(-2, -1)) - mx * mx
    vy = (wy * wy).mean(axis=(-2, -1)) - my * my
    cxy = (wx * wy).mean(axis=(-2, -1)) - mx * my
    s = ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / (
        (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
    val = s.mean(axis=(-2, -1))
    return float(val) if val.ndim == 0 else val
