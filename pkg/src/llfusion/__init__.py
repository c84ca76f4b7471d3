"""Thermal-guided low-light image enhancement.

A compact, fully self-verifying pipeline: PNG IO, exposure degradation,
an illumination-gated channel-attention network with RGB<-thermal cross
attention, PCA channel reduction, Adam training with exact double-precision
gradients, PSNR/SSIM evaluation, and a single CLI.
"""

__version__ = "0.1.0"

from .degradation import DegradeParams, degrade, sample_exposure_factor
from .imageio import load_rgb, load_thermal, save_image
from .metrics import evaluate, psnr, ssim
from .model import (
    FusionNet,
    ModelConfig,
    PcaProjection,
    attention,
    num_parameters,
    pca_fit,
    pca_reduce,
)
from .training import TrainConfig, adam_step, augment, gradient_check, mae_loss, sample_patch, train

__all__ = [
    "DegradeParams", "FusionNet", "ModelConfig", "PcaProjection", "TrainConfig",
    "adam_step", "attention", "augment", "degrade", "evaluate",
    "gradient_check", "load_rgb", "load_thermal", "mae_loss", "num_parameters",
    "pca_fit", "pca_reduce", "psnr", "sample_exposure_factor", "sample_patch",
    "save_image", "ssim", "train",
]
