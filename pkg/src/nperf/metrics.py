"""PSNR and SSIM on float images in [0, data_range], with masked variants."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

SSIM_SIGMA = 1.5
SSIM_WIN = 11


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ValueError("images must be (H, W) or (H, W, C)")
    return a, b


def _mask(mask, shape):
    if mask is None:
        return None
    m = np.asarray(getattr(mask, "raster", mask), dtype=bool)
    if m.shape != shape[:2]:
        raise ValueError(f"mask shape {m.shape} does not match image {shape[:2]}")
    if not m.any():
        raise ValueError("mask selects no pixels")
    return m


def psnr(a, b, mask=None, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _pair(a, b)
    m = _mask(mask, a.shape)
    d = (a - b) ** 2
    mse = float(d[m].mean()) if m is not None else float(d.mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(data_range ** 2 / mse))


def ssim_map(a, b, data_range: float = 1.0) -> np.ndarray:
    """Per-pixel SSIM (channel-averaged for color) with an 11-tap Gaussian
    window (sigma 1.5) and population covariances."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN} for SSIM")
    C1 = (0.01 * data_range) ** 2
    C2 = (0.03 * data_range) ** 2
    truncate = ((SSIM_WIN - 1) // 2) / SSIM_SIGMA

    def blur(x):
        return gaussian_filter(x, sigma=SSIM_SIGMA, truncate=truncate, mode="reflect")

    maps = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        num = (2 * mx * my + C1) * (2 * cxy + C2)
        den = (mx * mx + my * my + C1) * (vx + vy + C2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


def ssim(a, b, mask=None, data_range: float = 1.0) -> float:
    """Mean SSIM. Unmasked: over the interior (a half-window border is
    cropped, as in common reference implementations). Masked: over the
    masked pixels of the full map."""
    a, b = _pair(a, b)
    m = _mask(mask, a.shape)
    s = ssim_map(a, b, data_range)
    if m is not None:
        return float(s[m].mean())
    pad = (SSIM_WIN - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


@dataclass
class Metrics:
    psnr: float
    ssim: float
    psnr_masked: Optional[float] = None
    ssim_masked: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(pred, target, mask=None, data_range: float = 1.0) -> Metrics:
    m = None if mask is None else np.asarray(getattr(mask, "raster", mask), dtype=bool)
    has_mask = m is not None and m.any()
    return Metrics(
        psnr=psnr(pred, target, data_range=data_range),
        ssim=ssim(pred, target, data_range=data_range),
        psnr_masked=psnr(pred, target, m, data_range) if has_mask else None,
        ssim_masked=ssim(pred, target, m, data_range) if has_mask else None,
    )


def format_value(x) -> str:
    """CSV formatting with the identical-input sentinel spelled ``inf``."""
    if x is None:
        return ""
    if np.isinf(x):
        return "inf"
    return f"{x:.6f}"
