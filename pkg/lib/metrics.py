#!/usr/bin/env python3
"""
Full-reference image quality metrics

PSNR over all channels with a 99 dB cap for identical images, and single-scale
SSIM with the canonical constants: 11x11 Gaussian window (sigma 1.5),
C1 = (0.01 L)^2, C2 = (0.03 L)^2, L = 1, computed per channel over valid
window positions and averaged.
"""

import math

import numpy as np
from scipy import signal

from .errors import ShapeError
from .image_io import ImageBuffer

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def _pixels(img) -> np.ndarray:
    if isinstance(img, ImageBuffer):
        return img.pixels.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def psnr(pred, ref, max_value: float = 1.0) -> float:
    a, b = _pixels(pred), _pixels(ref)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ {list(a.shape)} vs {list(b.shape)}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_value ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim_channel(x: np.ndarray, y: np.ndarray, window: np.ndarray, data_range: float = 1.0) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def filt(a):
        return signal.correlate2d(a, window, mode='valid')

    mu_x, mu_y = filt(x), filt(y)
    sigma_xx = filt(x * x) - mu_x ** 2
    sigma_yy = filt(y * y) - mu_y ** 2
    sigma_xy = filt(x * y) - mu_x * mu_y

    numerator = (2 * mu_x * mu_y + c1) * (2 * sigma_xy + c2)
    denominator = (mu_x ** 2 + mu_y ** 2 + c1) * (sigma_xx + sigma_yy + c2)
    return float(np.mean(numerator / denominator))


def ssim(pred, ref, data_range: float = 1.0) -> float:
    """Mean SSIM of [H,W,3] images (or [H,W] maps)"""
    a, b = _pixels(pred), _pixels(ref)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ {list(a.shape)} vs {list(b.shape)}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ShapeError(f"ssim: image {a.shape[0]}x{a.shape[1]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    window = gaussian_window()
    scores = [ssim_channel(a[:, :, c], b[:, :, c], window, data_range) for c in range(a.shape[2])]
    return float(np.mean(scores))
