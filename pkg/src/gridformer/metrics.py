"""PSNR and SSIM on (3, H, W) images with values in [0, 1]."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

PSNR_CAP = 99.0
LUMA = (0.299, 0.587, 0.114)


def rgb_to_y(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ContractError(f"rgb_to_y expects a (3,H,W) image, got {img.shape}")
    return (LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2])[None]


def psnr(a: np.ndarray, b: np.ndarray, channel_mode: str = "rgb") -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    if channel_mode == "y":
        a, b = rgb_to_y(a), rgb_to_y(b)
    elif channel_mode != "rgb":
        raise ContractError(f"channel_mode must be 'rgb' or 'y', got {channel_mode!r}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(img, k, axis=-2) @ g
    return sliding_window_view(rows, k, axis=-1) @ g


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5, k1=0.01, k2=0.03, data_range=1.0) -> float:
    """Mean SSIM over valid window positions, averaged across channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < window or a.shape[-2] < window:
        raise ContractError(f"ssim: image {a.shape[-2:]} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
