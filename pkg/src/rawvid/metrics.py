"""PSNR and Gaussian-window SSIM on images in [0, 1]."""
from __future__ import annotations

import math

import numpy as np

from . import kernels
from .errors import DimensionError

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11 x 11 window
K1, K2 = 0.01, 0.03


def _as_array(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    elif hasattr(x, "data") and not isinstance(x, np.ndarray):
        x = x.data
    return np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)


def _check(pred, gt):
    pred, gt = _as_array(pred), _as_array(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt):
    pred, gt = _check(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def gaussian_taps(sigma=SSIM_SIGMA, radius=SSIM_RADIUS):
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def _ssim_plane(a, b, taps):
    c1, c2 = K1 ** 2, K2 ** 2
    mu_a = kernels.separable_filter(a, taps)
    mu_b = kernels.separable_filter(b, taps)
    var_a = kernels.separable_filter(a * a, taps) - mu_a ** 2
    var_b = kernels.separable_filter(b * b, taps) - mu_b ** 2
    cov = kernels.separable_filter(a * b, taps) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    r = len(taps) // 2
    return float(s[r:-r, r:-r].mean())


def ssim(pred, gt):
    """Mean SSIM; (H, W) is scored directly and (C, H, W) averages the channels."""
    pred, gt = _check(pred, gt)
    if pred.ndim not in (2, 3):
        raise DimensionError(f"expected (H, W) or (C, H, W), got {pred.shape}")
    if min(pred.shape[-2:]) < 2 * SSIM_RADIUS + 1:
        raise DimensionError(f"image {pred.shape[-2:]} smaller than the {2 * SSIM_RADIUS + 1}px window")
    taps = gaussian_taps()
    if pred.ndim == 2:
        return _ssim_plane(pred, gt, taps)
    return float(np.mean([_ssim_plane(p, g, taps) for p, g in zip(pred, gt)]))


def metrics(pred, gt, domain="raw"):
    if domain not in ("raw", "srgb"):
        raise ValueError(f"domain must be raw or srgb, got {domain!r}")
    return {"psnr": psnr(pred, gt), "ssim": ssim(pred, gt)}
