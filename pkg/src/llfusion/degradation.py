"""Synthetic low-exposure degradation: divide by an exposure factor, add
heteroscedastic Gaussian noise (shot variance proportional to the darkened
signal plus a constant read-noise floor), clamp to [0,1].

Randomness is counter-based (Philox keyed by seed and image index), so
results are reproducible regardless of call order or threading.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import validate_image

DEFAULT_SHOT_COEFF = 0.01
DEFAULT_READ_COEFF = 1e-4


@dataclass(frozen=True)
class DegradeParams:
    exposure_factor: float
    shot_coeff: float = DEFAULT_SHOT_COEFF
    read_coeff: float = DEFAULT_READ_COEFF
    seed: int = 0

    def __post_init__(self):
        if not 1.0 <= self.exposure_factor <= 100.0:
            raise ValueError(f"exposure_factor must be in [1, 100], got {self.exposure_factor}")
        if self.shot_coeff < 0 or self.read_coeff < 0:
            raise ValueError("noise coefficients must be >= 0")


def degrade(img: np.ndarray, p: DegradeParams, image_index: int = 0) -> np.ndarray:
    """out = clamp(img / exposure_factor + n, 0, 1) with n ~ N(0, a*dark + b)
    per pixel. Identical (img, p, image_index) gives bit-identical output."""
    validate_image(img, channels=img.shape[2], min_size=1)
    dark = np.asarray(img, dtype=np.float64) / p.exposure_factor
    if p.shot_coeff == 0.0 and p.read_coeff == 0.0:
        return np.clip(dark, 0.0, 1.0)
    rng = np.random.Generator(np.random.Philox(key=[p.seed & 0xFFFFFFFFFFFFFFFF,
                                                    image_index & 0xFFFFFFFFFFFFFFFF]))
    std = np.sqrt(p.shot_coeff * dark + p.read_coeff)
    noise = rng.standard_normal(dark.shape) * std
    return np.clip(dark + noise, 0.0, 1.0)


def sample_exposure_factor(rng: np.random.Generator, low: float = 5.0, high: float = 20.0) -> float:
    """Uniform draw in [low, high); deterministic under a fixed generator state."""
    if low >= high:
        raise ValueError(f"need low < high, got [{low}, {high}]")
    return float(rng.uniform(low, high))
