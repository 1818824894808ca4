"""Windowed structural similarity shared by the loss, metrics, and selection.

Local statistics use an 11x11 Gaussian window (sigma 1.5) over fully interior
("valid") window positions, matching the original windowed formulation; the
reported score is the mean of the local map. Images smaller than the window
shrink it to the largest odd size that fits. Stabilizers are C1 = (0.01 L)^2
and C2 = (0.03 L)^2 for dynamic range L.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.signal import convolve2d

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5


@lru_cache(maxsize=16)
def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(k, k)
    return w / w.sum()


def _effective_window(shape) -> int:
    size = min(WINDOW_SIZE, shape[0], shape[1])
    if size % 2 == 0:
        size -= 1
    return max(size, 1)


def _check_pair(a, b, dynamic_range):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("ssim expects 2D images")
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if dynamic_range <= 0:
        raise ValueError("dynamic_range must be positive")
    return a, b


def _local_stats(a, b, win):
    f = lambda x: convolve2d(x, win, mode="valid")
    mx, my = f(a), f(b)
    return mx, my, f(a * a), f(b * b), f(a * b)


def ssim(a: np.ndarray, b: np.ndarray, dynamic_range: float) -> float:
    """Mean local SSIM in [-1, 1]; symmetric in its image arguments."""
    a, b, = _check_pair(a, b, dynamic_range)
    win = gaussian_window(_effective_window(a.shape))
    mx, my, mxx, myy, mxy = _local_stats(a, b, win)
    C1 = (0.01 * dynamic_range) ** 2
    C2 = (0.03 * dynamic_range) ** 2
    sx = mxx - mx * mx
    sy = myy - my * my
    sxy = mxy - mx * my
    S = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sx + sy + C2))
    return float(S.mean())


def ssim_with_grad(a: np.ndarray, b: np.ndarray, dynamic_range: float):
    """Mean SSIM plus its gradient with respect to the first image.

    The gradient routes the local map's sensitivity back through the window
    sums: d mean(S) / da = conv_full(G1) + 2 a conv_full(G2) + b conv_full(G3)
    over the three windowed moments of a.
    """
    a, b = _check_pair(a, b, dynamic_range)
    win = gaussian_window(_effective_window(a.shape))
    mx, my, mxx, myy, mxy = _local_stats(a, b, win)
    C1 = (0.01 * dynamic_range) ** 2
    C2 = (0.03 * dynamic_range) ** 2
    sx = mxx - mx * mx
    sy = myy - my * my
    sxy = mxy - mx * my
    A1 = 2 * mx * my + C1
    A2 = 2 * sxy + C2
    B1 = mx * mx + my * my + C1
    B2 = sx + sy + C2
    S = (A1 * A2) / (B1 * B2)
    n = S.size
    dS_dA1 = A2 / (B1 * B2)
    dS_dA2 = A1 / (B1 * B2)
    dS_dB1 = -S / B1
    dS_dB2 = -S / B2
    G1 = (2 * my * dS_dA1 + 2 * mx * dS_dB1) + dS_dB2 * (-2 * mx) + 2 * dS_dA2 * (-my)
    G2 = dS_dB2
    G3 = 2 * dS_dA2
    g = lambda G: convolve2d(G, win, mode="full")
    grad = (g(G1) + 2 * a * g(G2) + b * g(G3)) / n
    return float(S.mean()), grad


def dssim(a: np.ndarray, b: np.ndarray, dynamic_range: float) -> float:
    """Structural dissimilarity (1 - SSIM) / 2, in [0, 1]."""
    return 0.5 * (1.0 - ssim(a, b, dynamic_range))
