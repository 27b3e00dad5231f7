"""Image-quality metrics used for evaluation and pipeline monitoring.

All metrics accept an optional (H, W) binary mask and then only aggregate over
masked pixels. SSIM is computed on a channel-mean grayscale with the standard
11x11 Gaussian window (sigma 1.5).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _flatten(pred: np.ndarray, ref: np.ndarray, mask) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"metric inputs differ in shape: {pred.shape} vs {ref.shape}")
    if mask is None:
        return pred.reshape(-1), ref.reshape(-1)
    m = np.asarray(mask) > 0.5
    if m.shape != pred.shape[:2]:
        raise ValueError("mask shape does not match images")
    if not m.any():
        raise ValueError("mask selects no pixels")
    return pred[m].reshape(-1), ref[m].reshape(-1)


def rmse(pred: np.ndarray, ref: np.ndarray, mask=None) -> float:
    p, r = _flatten(pred, ref, mask)
    return float(np.sqrt(np.mean((p - r) ** 2)))


def psnr(pred: np.ndarray, ref: np.ndarray, mask=None, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    p, r = _flatten(pred, ref, mask)
    mse = float(np.mean((p - r) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image.mean(axis=2)
    return image


def ssim(pred: np.ndarray, ref: np.ndarray, mask=None, peak: float = 1.0) -> float:
    """Mean structural similarity over the (masked) image."""
    a = _gray(pred)
    b = _gray(ref)
    if a.shape != b.shape:
        raise ValueError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kern = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)

    def blur(x: np.ndarray) -> np.ndarray:
        y = correlate1d(x, kern, axis=0, mode="reflect")
        return correlate1d(y, kern, axis=1, mode="reflect")

    mu_a = blur(a)
    mu_b = blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    smap = num / den
    if mask is None:
        return float(smap.mean())
    m = np.asarray(mask) > 0.5
    if m.shape != smap.shape:
        raise ValueError("mask shape does not match images")
    if not m.any():
        raise ValueError("mask selects no pixels")
    return float(smap[m].mean())


def normal_mae(pred: np.ndarray, ref: np.ndarray, mask=None) -> float:
    """Mean angular error between normal maps, in degrees.

    Inputs must hold unit vectors wherever the mask is set.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape or pred.shape[-1] != 3:
        raise ValueError("normal maps must share an (..., 3) shape")
    if mask is None:
        m = np.ones(pred.shape[:-1], dtype=bool)
    else:
        m = np.asarray(mask) > 0.5
        if m.shape != pred.shape[:-1]:
            raise ValueError("mask shape does not match normal maps")
    if not m.any():
        raise ValueError("mask selects no pixels")
    for name, arr in (("predicted", pred), ("reference", ref)):
        norms = np.linalg.norm(arr[m], axis=-1)
        if np.abs(norms - 1.0).max() > 1e-3:
            raise ValueError(f"{name} normal map contains non-unit vectors")
    dots = np.clip(np.sum(pred[m] * ref[m], axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dots)).mean())
