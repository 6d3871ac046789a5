"""Separable resampling: Mitchell-Netravali for enlarging, Lanczos-3 for
shrinking, plus the crop-and-resize finalize stage."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .geometry import RenderError

__all__ = [
    "mitchell_netravali",
    "lanczos3",
    "resample_axis",
    "resample_image",
    "finalize",
]


def mitchell_netravali(x: np.ndarray, b: float = 1.0 / 3.0, c: float = 1.0 / 3.0) -> np.ndarray:
    ax = np.abs(np.asarray(x, dtype=np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    inner = (
        (12 - 9 * b - 6 * c) * ax3 + (-18 + 12 * b + 6 * c) * ax2 + (6 - 2 * b)
    ) / 6.0
    outer = (
        (-b - 6 * c) * ax3
        + (6 * b + 30 * c) * ax2
        + (-12 * b - 48 * c) * ax
        + (8 * b + 24 * c)
    ) / 6.0
    return np.where(ax < 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _sinc(x: np.ndarray) -> np.ndarray:
    return np.sinc(x)  # normalized sinc: sin(pi x)/(pi x)


def lanczos3(x: np.ndarray) -> np.ndarray:
    ax = np.abs(np.asarray(x, dtype=np.float64))
    return np.where(ax < 3.0, _sinc(ax) * _sinc(ax / 3.0), 0.0)


def _weight_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix, rows normalized to unit sum.

    Enlarging uses Mitchell-Netravali (radius 2); shrinking scales the
    Lanczos-3 kernel by the decimation factor (radius 3 / scale).
    """
    if n_out == n_in:
        return np.eye(n_in)
    scale = n_out / n_in
    if scale > 1.0:
        kernel, radius, karg = mitchell_netravali, 2.0, 1.0
    else:
        kernel, radius, karg = lanczos3, 3.0 / scale, scale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    w = np.zeros((n_out, n_in))
    for row, cx in enumerate(centers):
        lo = max(int(np.floor(cx - radius)), 0)
        hi = min(int(np.ceil(cx + radius)) + 1, n_in)
        taps = np.arange(lo, hi)
        vals = kernel((cx - taps) * karg)
        total = vals.sum()
        if total == 0:
            raise RenderError("degenerate resampling kernel")
        w[row, lo:hi] = vals / total
    return w


def resample_axis(img: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = img.shape[axis]
    if n_out == n_in:
        return img
    w = _weight_matrix(n_in, n_out)
    moved = np.moveaxis(img, axis, 0)
    out = np.tensordot(w, moved, axes=(1, 0))
    return np.moveaxis(out, 0, axis)


def resample_image(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize (H, W[, C]) to size=(h_out, w_out); each axis picks its filter."""
    h_out, w_out = size
    return resample_axis(resample_axis(img, h_out, 0), w_out, 1)


def finalize(
    img: np.ndarray,
    crop_region: Optional[tuple[int, int, int, int]] = None,
    target: tuple[int, int] = (512, 512),
) -> np.ndarray:
    """Crop (x, y, w, h) to fill the frame, then resample to `target`.

    A full-frame crop at target size takes the identity path (no resampling).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if crop_region is None:
        x0, y0, cw, ch = 0, 0, w, h
    else:
        x0, y0, cw, ch = crop_region
    if cw <= 0 or ch <= 0:
        raise RenderError("empty crop region")
    if x0 < 0 or y0 < 0 or x0 + cw > w or y0 + ch > h:
        raise RenderError(f"crop {crop_region} outside image {w}x{h}")
    cropped = img[y0 : y0 + ch, x0 : x0 + cw]
    if (ch, cw) == tuple(target):
        return cropped.copy()
    return resample_image(cropped, target)
