"""Full-reference quality metrics and the evaluation runner.

PSNR and SSIM operate on float images in [0,1] (dynamic range 1.0); no 8-bit
quantization happens before measurement. SSIM is the standard single-scale
form: 11x11 Gaussian window with sigma 1.5, K1=0.01, K2=0.03, computed per
channel over valid windows and averaged.
"""
from __future__ import annotations

import json
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .datasets import Manifest, load_aligned_row
from .errors import ShapeError
from .model.checkpoint import load_checkpoint

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 * log10(1 / MSE), peak 1.0. Identical images return +inf (the
    sentinel is excluded from report means, with a warning)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr: shapes differ ({a.shape} vs {b.shape})")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    k = np.outer(g, g)
    return k / k.sum()


def _windowed_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    win = sliding_window_view(x, kernel.shape)
    return np.einsum("hwij,ij->hw", win, kernel)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all valid 11x11 windows, per channel, channels averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes differ ({a.shape} vs {b.shape})")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}"
        )
    kern = _gaussian_kernel()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mx = _windowed_mean(x, kern)
        my = _windowed_mean(y, kern)
        sxx = _windowed_mean(x * x, kern) - mx * mx
        syy = _windowed_mean(y * y, kern) - my * my
        sxy = _windowed_mean(x * y, kern) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# evaluation runner
# ---------------------------------------------------------------------------

@dataclass
class EvalRow:
    id: str
    psnr_db: float | None
    ssim: float | None
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    mean_psnr_db: float = math.nan
    mean_ssim: float = math.nan
    method: str = ""
    config_hash: str = ""

    def ok_rows(self) -> list[EvalRow]:
        return [r for r in self.rows if r.error is None]


def _finalize(report: EvalReport) -> None:
    ok = report.ok_rows()
    finite_psnr = [r.psnr_db for r in ok if math.isfinite(r.psnr_db)]
    if len(finite_psnr) < len(ok):
        warnings.warn("infinite PSNR rows excluded from the mean", stacklevel=3)
    report.mean_psnr_db = float(np.mean(finite_psnr)) if finite_psnr else math.nan
    report.mean_ssim = float(np.mean([r.ssim for r in ok])) if ok else math.nan


def write_report_csv(report: EvalReport, path) -> None:
    """Header `id,psnr_db,ssim,lpips`; the lpips column stays empty (needs
    pretrained perceptual weights, out of scope). Failed rows keep their id
    with blank metrics; the last data row is the dataset mean."""
    lines = [
        f"# method={report.method}",
        f"# config_hash={report.config_hash}",
        "id,psnr_db,ssim,lpips",
    ]
    for r in report.rows:
        if r.error is not None:
            lines.append(f"{r.id},,,")
        else:
            p = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.6f}"
            lines.append(f"{r.id},{p},{r.ssim:.6f},")
    if report.rows:
        lines.append(f"mean,{report.mean_psnr_db:.6f},{report.mean_ssim:.6f},")
    Path(path).write_text("\n".join(lines) + "\n")


def evaluate(manifest: Manifest, checkpoint_path, output_path) -> EvalReport:
    """Run the model over every manifest row at full resolution, score
    PSNR/SSIM against the reference, and write the CSV report. Unloadable
    rows are recorded as failed and the run continues."""
    ck = load_checkpoint(checkpoint_path)
    model = ck.model()
    cfg_digest = hashlib.sha256(json.dumps(
        {"model_config": ck.cfg.to_dict(), "ablation_mode": ck.mode},
        sort_keys=True, separators=(",", ":"),
    ).encode()).hexdigest()[:16]
    report = EvalReport(method=ck.mode, config_hash=cfg_digest)
    for row in manifest.rows:
        try:
            rgb, thermal, ref, _ = load_aligned_row(row)
            out = model.forward(rgb, thermal, ck.proj, clamp=True)
            report.rows.append(EvalRow(id=row.id, psnr_db=psnr(out, ref), ssim=ssim(out, ref)))
        except Exception as e:  # failed row: record and continue
            report.rows.append(EvalRow(id=row.id, psnr_db=None, ssim=None, error=str(e)))
    _finalize(report)
    if output_path is not None:
        write_report_csv(report, output_path)
    return report
