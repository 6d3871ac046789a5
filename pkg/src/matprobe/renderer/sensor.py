"""Thin-lens and sensor models: pixel-area box integration, pulse-train
sampling, and signal-dependent Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import RenderError

__all__ = ["ThinLens", "SensorModel", "pixel_integrate", "sample_grid", "add_noise"]


@dataclass(frozen=True)
class ThinLens:
    """Pupil disk of radius `pupil_radius` centered at the piercing point
    (the origin); `focus_distance` locates the focal surface. Radius 0 is a
    pinhole."""

    focus_distance: float  # meters
    pupil_radius: float = 0.0  # meters

    def __post_init__(self):
        if self.focus_distance <= 0:
            raise RenderError("focus distance must be positive")
        if self.pupil_radius < 0:
            raise RenderError("pupil radius must be non-negative")


@dataclass(frozen=True)
class SensorModel:
    """Sensor geometry in source-pixel units plus the noise model.

    pixel_pitch: output pixel spacing; sample_period: dense ray-grid spacing
    (pitch / period must be a positive integer); fill_factor: active-area
    fraction of the pitch; read_noise / photon_gain: Gaussian noise with
    variance read_noise^2 + photon_gain * signal.
    """

    pixel_pitch: float = 1.0
    fill_factor: float = 1.0
    sample_period: float = 1.0
    read_noise: float = 0.0
    photon_gain: float = 0.0

    def __post_init__(self):
        if self.pixel_pitch <= 0 or self.sample_period <= 0:
            raise RenderError("pixel pitch and sample period must be positive")
        if not (0.0 < self.fill_factor <= 1.0):
            raise RenderError("fill factor must be in (0, 1]")
        if self.read_noise < 0 or self.photon_gain < 0:
            raise RenderError("noise parameters must be non-negative")

    @property
    def samples_per_pitch(self) -> int:
        ratio = self.pixel_pitch / self.sample_period
        m = int(round(ratio))
        if m < 1 or abs(ratio - m) > 1e-9:
            raise RenderError(
                f"pixel pitch {self.pixel_pitch} must be an integer multiple "
                f"of the sample period {self.sample_period}"
            )
        return m


def pixel_integrate(img: np.ndarray, fill_factor: float, samples_per_pitch: int = 1) -> np.ndarray:
    """Convolve with the normalized box covering the pixel active area.

    The box side is fill_factor * pitch, i.e. fill_factor * samples_per_pitch
    dense samples. A box under one sample wide degenerates to the identity
    (the fill->0 limit).
    """
    if not (0.0 < fill_factor <= 1.0):
        raise RenderError("fill factor must be in (0, 1]")
    size = int(round(fill_factor * samples_per_pitch))
    if size <= 1:
        return np.asarray(img, dtype=np.float64).copy()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return np.stack(
            [ndimage.uniform_filter(img[..., c], size=size, mode="nearest")
             for c in range(img.shape[2])],
            axis=-1,
        )
    return ndimage.uniform_filter(img, size=size, mode="nearest")


def sample_grid(img: np.ndarray, period: int) -> np.ndarray:
    """Values at the pulse-train lattice: every `period`-th dense sample,
    phase-centered within each period."""
    period = int(period)
    if period < 1:
        raise RenderError("sampling period must be >= 1")
    if period == 1:
        return np.asarray(img, dtype=np.float64).copy()
    off = (period - 1) // 2
    return np.asarray(img, dtype=np.float64)[off::period, off::period].copy()


def add_noise(img: np.ndarray, s: SensorModel, seed: int) -> np.ndarray:
    """Zero-mean Gaussian noise, variance read_noise^2 + photon_gain*max(v,0)."""
    img = np.asarray(img, dtype=np.float64)
    if s.read_noise == 0.0 and s.photon_gain == 0.0:
        return img.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    sigma = np.sqrt(s.read_noise**2 + s.photon_gain * np.maximum(img, 0.0))
    return img + rng.standard_normal(img.shape) * sigma
