"""Volumetric and projection-space evaluation metrics."""
from __future__ import annotations

import math

import numpy as np

from .field import VoxelGrid
from .ssim import ssim


def _values(x) -> np.ndarray:
    if isinstance(x, VoxelGrid):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def psnr_3d(recon, gt) -> float:
    """Peak signal-to-noise ratio over the full volume, peak = max(gt), in dB.

    Identical volumes return math.inf (serialized as the string "inf" in CSV
    outputs, never NaN).
    """
    r = _values(recon)
    g = _values(gt)
    if r.shape != g.shape:
        raise ValueError(f"volume shapes differ: {r.shape} vs {g.shape}")
    peak = float(g.max())
    if peak <= 0:
        raise ValueError("ground truth volume is empty; PSNR undefined")
    mse = float(np.mean((r - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def psnr_2d(rendered, gt, peak: float | None = None) -> float:
    """Projection PSNR in dB; peak defaults to max(gt)."""
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if r.shape != g.shape:
        raise ValueError(f"image shapes differ: {r.shape} vs {g.shape}")
    if peak is None:
        peak = float(g.max())
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((r - g) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim_3d_slices(recon, gt) -> float:
    """Mean 2D SSIM over every slice of the three axis-aligned planes.

    Dynamic range is max(gt) for all slices; the shared projection-space SSIM
    kernel is reused so the loss, selection, and evaluation agree on one
    definition.
    """
    r = _values(recon)
    g = _values(gt)
    if r.shape != g.shape:
        raise ValueError(f"volume shapes differ: {r.shape} vs {g.shape}")
    peak = float(g.max())
    if peak <= 0:
        peak = 1.0
    scores = []
    for axis in range(3):
        for idx in range(r.shape[axis]):
            a = np.take(r, idx, axis=axis)
            b = np.take(g, idx, axis=axis)
            scores.append(ssim(a, b, peak))
    return float(np.mean(scores))


def format_metric(x: float) -> str:
    """CSV rendering of a metric value; infinities become "inf"."""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.10g}"
