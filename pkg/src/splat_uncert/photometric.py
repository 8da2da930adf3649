"""Per-pixel photometric residuals: L1, SSIM/DSSIM, the combined loss map, PSNR."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
DEFAULT_LAMBDA = 0.2


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _as_color(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    return a[:, :, None] if a.ndim == 2 else a


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_color(a), _as_color(b)
    if a.shape != b.shape:
        raise ValueError(f"image dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def l1_map(a, b) -> np.ndarray:
    a, b = _check_pair(a, b)
    return np.abs(a - b).mean(axis=2)


def _blur(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    # mode="reflect" is symmetric (edge-repeating) padding
    return correlate1d(correlate1d(x, win, axis=0, mode="reflect"), win, axis=1, mode="reflect")


def ssim_map(a, b) -> np.ndarray:
    """Channel-averaged per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    a, b = _check_pair(a, b)
    h, w, c = a.shape
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} is smaller than the {SSIM_WINDOW}px SSIM window")
    win = gaussian_window()
    out = np.zeros((h, w))
    for ch in range(c):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x, mu_y = _blur(x, win), _blur(y, win)
        sxx = _blur(x * x, win) - mu_x * mu_x
        syy = _blur(y * y, win) - mu_y * mu_y
        sxy = _blur(x * y, win) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
        out += num / den
    return out / c


def dssim_map(a, b) -> np.ndarray:
    return np.clip(1.0 - ssim_map(a, b), 0.0, 1.0)


@dataclass(frozen=True)
class ResidualMap:
    values: np.ndarray
    lam: float = DEFAULT_LAMBDA
    source: dict = field(default_factory=dict)


def residual_values(render, gt, lam: float = DEFAULT_LAMBDA) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    l1 = l1_map(render, gt)
    if lam == 0.0:
        return l1
    return (1.0 - lam) * l1 + lam * dssim_map(render, gt)


def residual_map(render, gt, lam: float = DEFAULT_LAMBDA, **source) -> ResidualMap:
    """``(1 - lam) * L1 + lam * DSSIM`` per pixel."""
    return ResidualMap(residual_values(render, gt, lam), lam, source)


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; identical images give ``inf``."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def mean_ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())
