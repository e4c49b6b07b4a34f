"""Separable box sums over truncated windows, plus Gaussian smoothing.

The box sum at voxel p covers the cube ``[p - h, p + h]`` intersected with
the volume (h = window // 2); windows are truncated at the faces, never
padded.  Implemented with per-axis cumulative sums so the truncation is
exact.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = ["box_sum", "box_count", "local_mean_variance", "gaussian_smooth"]


def _box_sum_1d(a: np.ndarray, h: int, axis: int) -> np.ndarray:
    n = a.shape[axis]
    c = np.cumsum(a, axis=axis, dtype=np.float64)
    idx = np.arange(n)
    upper = np.take(c, np.minimum(idx + h, n - 1), axis=axis)
    lo = idx - h - 1
    lower = np.take(c, np.maximum(lo, 0), axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n
    lower = lower * (lo >= 0).reshape(shape)
    return upper - lower


def box_sum(a: np.ndarray, window: int) -> np.ndarray:
    """Sum of ``a`` over the truncated window**3 neighborhood of each voxel."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    h = window // 2
    out = np.asarray(a, dtype=np.float64)
    for axis in range(out.ndim):
        out = _box_sum_1d(out, h, axis)
    return out


def box_count(shape: tuple[int, ...], window: int) -> np.ndarray:
    """Number of in-bounds voxels in each truncated window (broadcastable product)."""
    h = window // 2
    counts = []
    for axis, n in enumerate(shape):
        idx = np.arange(n)
        c = np.minimum(idx + h, n - 1) - np.maximum(idx - h, 0) + 1
        s = [1] * len(shape)
        s[axis] = n
        counts.append(c.reshape(s).astype(np.float64))
    out = counts[0]
    for c in counts[1:]:
        out = out * c
    return out


def local_mean_variance(a: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-voxel mean and population variance over the truncated window."""
    cnt = box_count(a.shape, window)
    s1 = box_sum(a, window)
    s2 = box_sum(a * a, window)
    mean = s1 / cnt
    var = np.maximum(s2 / cnt - mean * mean, 0.0)
    return mean, var


def gaussian_smooth(a: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian filter with edge replication; sigma in voxels, 0 = identity."""
    if sigma <= 0.0:
        return np.array(a, dtype=np.float64)
    return gaussian_filter(np.asarray(a, dtype=np.float64), sigma=sigma, mode="nearest")
