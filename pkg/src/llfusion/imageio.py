"""PNG load/save with bit-exact normalization.

Images are float64 arrays in [0,1]: RGB is (H,W,3), thermal (H,W,1).
8- and 16-bit PNGs are read; writes are 8-bit with round-half-up
quantization, so a save/load round trip moves any value by at most 1/510.
"""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .errors import FormatError, ShapeError

MIN_SIZE = 8  # smallest processable height/width for RGB frames


def _read_raw(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such image: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"could not decode image: {path}")
    return raw


def _denominator(raw: np.ndarray) -> float:
    if raw.dtype == np.uint8:
        return 255.0
    if raw.dtype == np.uint16:
        return 65535.0
    raise FormatError(f"unsupported sample type {raw.dtype} (need 8- or 16-bit)")


def validate_image(img: np.ndarray, channels: int = 3, min_size: int = MIN_SIZE) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != channels:
        raise ShapeError(f"expected (H,W,{channels}) image, got shape {img.shape}")
    if img.shape[0] < min_size or img.shape[1] < min_size:
        raise ShapeError(f"image {img.shape[:2]} below minimum {min_size}x{min_size}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image values outside [0, 1]")


def load_rgb(path) -> np.ndarray:
    """Load a 3-channel PNG as (H,W,3) float64 in [0,1]; p -> p / (2^b - 1)."""
    raw = _read_raw(path)
    if raw.ndim != 3 or raw.shape[2] != 3:
        ch = 1 if raw.ndim == 2 else raw.shape[2]
        raise FormatError(f"{path}: expected 3 channels, found {ch}")
    denom = _denominator(raw)
    img = raw[:, :, ::-1].astype(np.float64) / denom  # BGR -> RGB
    validate_image(img, channels=3)
    return img


def load_thermal(path) -> np.ndarray:
    """Load a thermal frame as (H,W,1) float64 in [0,1].

    Single-channel files are taken as-is. 3-channel files are accepted only
    if they are grayscale-encoded (channel spread <= 1 LSB, common in public
    RGB-T sets); channels are then averaged.
    """
    raw = _read_raw(path)
    denom = _denominator(raw)
    if raw.ndim == 2:
        data = raw.astype(np.float64)
    elif raw.ndim == 3 and raw.shape[2] == 3:
        spread = raw.max(axis=2).astype(np.int64) - raw.min(axis=2).astype(np.int64)
        if spread.max() > 1:
            raise FormatError(
                f"{path}: 3-channel thermal is not grayscale (channel spread {spread.max()} LSB)"
            )
        data = raw.astype(np.float64).mean(axis=2)
    else:
        ch = raw.shape[2] if raw.ndim == 3 else raw.ndim
        raise FormatError(f"{path}: expected 1 or 3 channels, found {ch}")
    img = (data / denom)[:, :, None]
    validate_image(img, channels=1, min_size=1)
    return img


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Clamp to [0,1], then round-half-up to 8-bit (no banker's rounding)."""
    clamped = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(clamped * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write an (H,W,3) image as 8-bit PNG. Values are clamped and quantized;
    load_rgb(save_image(x)) differs from clamp(x) by at most 1/510 per element."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"save_image expects (H,W,3), got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("refusing to save non-finite image data")
    path = Path(path)
    ok = cv2.imwrite(str(path), quantize_u8(img)[:, :, ::-1])  # RGB -> BGR
    if not ok:
        raise OSError(f"could not write image: {path}")


def save_gray_u8(img: np.ndarray, path) -> None:
    """Write an (H,W) or (H,W,1) single-channel image as 8-bit PNG."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise ShapeError(f"save_gray_u8 expects (H,W) or (H,W,1), got {img.shape}")
    data = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    if not cv2.imwrite(str(path), data):
        raise OSError(f"could not write image: {path}")
