"""Image quality metrics over optional pixel regions.

PSNR is 10*log10(1/MSE) for unit-range images, with a 99.0 dB sentinel for
identical inputs. SSIM uses uniform 8x8 windows at stride 1 on Rec.601 luma,
constants C1=(0.01)^2, C2=(0.03)^2, population variance; the region selects
windows by their center pixel (offset +3 from the window origin).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .errors import DimensionMismatch, EmptyRegion
from .images import ImageBuffer

INF_DB = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
_LUMA = np.array([0.299, 0.587, 0.114])
_CENTER_OFF = (SSIM_WINDOW - 1) // 2


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)


def _check_pair(a, b, region):
    a, b = _pixels(a), _pixels(b)
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != a.shape[:2]:
            raise DimensionMismatch(
                f"region {region.shape} does not match image {a.shape[:2]}")
    return a, b, region


def psnr(a, b, region: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB over the region (all pixels if None)."""
    a, b, region = _check_pair(a, b, region)
    diff = (a - b) ** 2
    if region is not None:
        if not region.any():
            raise EmptyRegion("PSNR region selects no pixels")
        diff = diff[region]
    mse = float(np.mean(diff))
    if mse == 0.0:
        return INF_DB
    return 10.0 * math.log10(1.0 / mse)


def luma(img) -> np.ndarray:
    return _pixels(img) @ _LUMA


def ssim(a, b, region: np.ndarray | None = None) -> float:
    """Mean local SSIM over 8x8 windows whose centers lie in the region."""
    a, b, region = _check_pair(a, b, region)
    h, w = a.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise DimensionMismatch(
            f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    la, lb = luma(a), luma(b)
    wa = sliding_window_view(la, (SSIM_WINDOW, SSIM_WINDOW))
    wb = sliding_window_view(lb, (SSIM_WINDOW, SSIM_WINDOW))
    mu_a = wa.mean(axis=(2, 3))
    mu_b = wb.mean(axis=(2, 3))
    var_a = (wa ** 2).mean(axis=(2, 3)) - mu_a ** 2
    var_b = (wb ** 2).mean(axis=(2, 3)) - mu_b ** 2
    cov = (wa * wb).mean(axis=(2, 3)) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
    if region is None:
        return float(ssim_map.mean())
    centers = region[_CENTER_OFF:_CENTER_OFF + ssim_map.shape[0],
                     _CENTER_OFF:_CENTER_OFF + ssim_map.shape[1]]
    if not centers.any():
        raise EmptyRegion("SSIM region selects no window centers")
    return float(ssim_map[centers].mean())


def dilate(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    """Chebyshev dilation by ``radius`` pixels (square structuring element)."""
    if radius <= 0:
        return np.asarray(mask, dtype=bool)
    size = 2 * radius + 1
    return ndimage.maximum_filter(np.asarray(mask, dtype=bool), size=size)


def region_report(before, after, edited_region: np.ndarray) -> dict:
    """PSNR/SSIM split into edited and non-edited regions plus full frame."""
    edited_region = np.asarray(edited_region, dtype=bool)
    out = {
        "full": {"psnr": psnr(before, after), "ssim": ssim(before, after)},
    }
    for name, reg in (("edited", edited_region), ("non_edited", ~edited_region)):
        entry = {"psnr": None, "ssim": None}
        if reg.any():
            entry["psnr"] = psnr(before, after, reg)
            try:
                entry["ssim"] = ssim(before, after, reg)
            except EmptyRegion:
                pass  # region too thin to center any window
        out[name] = entry
    return out
