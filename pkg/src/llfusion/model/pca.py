"""PCA channel reduction for the fused features.

The projection is fitted once on a calibration pass and then frozen; during
the forward pass it acts as a constant linear map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass
class PcaProjection:
    mean: np.ndarray                      # (C_in,)
    basis: np.ndarray                     # (C_f, C_in), orthonormal rows
    explained_variance_fraction: float    # in [0, 1]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.basis.ndim != 2 or self.mean.ndim != 1 or self.basis.shape[1] != self.mean.shape[0]:
            raise ShapeError(
                f"inconsistent projection: mean {self.mean.shape}, basis {self.basis.shape}"
            )
        gram = self.basis @ self.basis.T
        if not np.allclose(gram, np.eye(self.basis.shape[0]), atol=1e-5):
            raise ValueError("PCA basis rows are not orthonormal within 1e-5")
        if not 0.0 <= self.explained_variance_fraction <= 1.0 + 1e-12:
            raise ValueError("explained_variance_fraction outside [0, 1]")

    @property
    def c_in(self) -> int:
        return self.mean.shape[0]

    @property
    def c_f(self) -> int:
        return self.basis.shape[0]


def pca_fit(samples: np.ndarray, c_f: int) -> PcaProjection:
    """Fit mean + top-c_f principal directions of `samples` (N, C_in).

    Rows of the basis are eigenvectors of the sample covariance in descending
    eigenvalue order, sign-fixed so the largest-magnitude entry of each row is
    positive (keeps refits reproducible).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"pca_fit expects (N, C_in) samples, got {x.shape}")
    n, c_in = x.shape
    if c_f > c_in:
        raise ValueError(f"c_f ({c_f}) cannot exceed the sample dimension ({c_in})")
    if n < c_in:
        raise ValueError(f"need at least {c_in} samples to fit, got {n}")
    mean = x.mean(axis=0)
    d = x - mean
    cov = (d.T @ d) / (n - 1)
    evals, evecs = np.linalg.eigh(cov)      # ascending
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]
    basis = evecs[:, :c_f].T.copy()
    for row in basis:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0
    total = float(evals.sum())
    if total <= 0.0:
        frac = 1.0  # degenerate: no variance at all, any basis explains it
    else:
        frac = float(np.clip(evals[:c_f].sum() / total, 0.0, 1.0))
    return PcaProjection(mean=mean, basis=basis, explained_variance_fraction=frac)


def pca_reduce(x: np.ndarray, proj: PcaProjection) -> np.ndarray:
    """Per-pixel projection: out[..., :] = basis @ (x[..., :] - mean)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != proj.c_in:
        raise ShapeError(
            f"pca_reduce: input has {x.shape[-1]} channels, projection expects {proj.c_in}"
        )
    return (x - proj.mean) @ proj.basis.T


def random_orthonormal_projection(c_in: int, c_f: int, rng: np.random.Generator) -> PcaProjection:
    """Valid stand-in projection (zero mean, random orthonormal rows); used by
    the gradient checker, which only needs *a* frozen linear map."""
    q, _ = np.linalg.qr(rng.standard_normal((c_in, c_in)))
    return PcaProjection(mean=np.zeros(c_in), basis=q[:, :c_f].T.copy(),
                         explained_variance_fraction=float(c_f) / c_in)
