"""Image quality metrics."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def psnr(x: np.ndarray, ref: np.ndarray, data_range: float | None = None) -> float:
    """``10 log10(data_range^2 / MSE)``; ``inf`` for identical images.

    ``data_range`` defaults to ``ref.max()``.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if data_range is None:
        data_range = float(ref.max())
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range ** 2 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-0.5 * (t / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    r = len(w) // 2
    out = correlate1d(correlate1d(img, w, axis=0, mode="constant"), w, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim_map(x: np.ndarray, ref: np.ndarray, data_range: float) -> np.ndarray:
    w = gaussian_window()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx = _filter_valid(x, w)
    my = _filter_valid(ref, w)
    sxx = _filter_valid(x * x, w) - mx * mx
    syy = _filter_valid(ref * ref, w) - my * my
    sxy = _filter_valid(x * ref, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x: np.ndarray, ref: np.ndarray, data_range: float | None = None) -> float:
    """Mean SSIM over all fully contained 11x11 Gaussian (sigma 1.5) windows."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of side >= {SSIM_WINDOW}")
    if data_range is None:
        data_range = float(ref.max())
    return float(np.mean(ssim_map(x, ref, data_range)))
