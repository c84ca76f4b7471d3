"""Shared fixtures: procedural test imagery and the 2-pair overfit fixture."""
from __future__ import annotations

import numpy as np
import pytest

from llfusion.datasets import Manifest, ManifestRow, save_manifest
from llfusion.degradation import DegradeParams, degrade
from llfusion.imageio import load_rgb, save_gray_u8, save_image
from llfusion.model import ModelConfig


def procedural_rgb(h: int, w: int, phase: float) -> np.ndarray:
    """Deterministic mid-bright pattern: smooth color gradients, a bright
    disc and a dark square, so there is structure at several scales."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= h
    xx /= w
    r = 0.55 + 0.35 * np.sin(2 * np.pi * (xx + 0.37 * phase)) * np.cos(np.pi * yy)
    g = 0.50 + 0.30 * np.cos(2 * np.pi * (1.3 * yy + 0.21 * phase + 0.4 * xx))
    b = 0.45 + 0.35 * np.sin(2 * np.pi * (0.8 * xx + 0.6 * yy + 0.11 * phase))
    img = np.stack([r, g, b], axis=-1)
    iy, ix = np.mgrid[0:h, 0:w]
    cy, cx, rad = h * (0.3 + 0.2 * phase), w * (0.6 - 0.15 * phase), 0.18 * min(h, w)
    img[(iy - cy) ** 2 + (ix - cx) ** 2 < rad**2] = [0.9, 0.8, 0.3]
    y0, x0 = int(h * 0.65), int(w * 0.15)
    img[y0 : y0 + h // 6, x0 : x0 + w // 6] = [0.12, 0.2, 0.5]
    return np.clip(img, 0.0, 1.0)


def procedural_thermal(h: int, w: int, phase: float) -> np.ndarray:
    """Thermal companion: a clean monotone response to scene luminance, the
    way a co-located thermal sensor tracks the same structures."""
    rgb = procedural_rgb(h, w, phase)
    lum = rgb.mean(axis=-1, keepdims=True)
    return np.clip(0.12 + 0.8 * lum**0.9, 0.0, 1.0)


def build_pair_fixture(root, n_pairs: int = 2, size: int = 64,
                       exposure_factor: float = 10.0, seed: int = 7) -> str:
    """Write reference/thermal/degraded-input PNGs plus a manifest; returns
    the manifest path. This is the overfit fixture of the acceptance suite."""
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_pairs):
        ref = procedural_rgb(size, size, float(i))
        save_image(ref, root / f"ref{i}.png")
        save_gray_u8(procedural_thermal(size, size, float(i)), root / f"th{i}.png")
        low = degrade(load_rgb(root / f"ref{i}.png"),
                      DegradeParams(exposure_factor=exposure_factor, seed=seed),
                      image_index=i)
        save_image(low, root / f"low{i}.png")
        rows.append(ManifestRow(
            id=f"pair{i}",
            rgb_low=str(root / f"low{i}.png"),
            thermal=str(root / f"th{i}.png"),
            rgb_ref=str(root / f"ref{i}.png"),
        ))
    manifest_path = root / "manifest.jsonl"
    save_manifest(Manifest(rows=rows, split="train"), manifest_path)
    return str(manifest_path)


@pytest.fixture(scope="session")
def pair_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("pairs")
    return build_pair_fixture(root)


@pytest.fixture()
def tiny_cfg():
    """Small config for fast exhaustive checks."""
    return ModelConfig(base_channels=8, heads=2, fused_channels=8,
                       attention_blocks_per_branch=1, ffn_expansion=2)
