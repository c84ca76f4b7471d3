"""Training recipe: MAE objective, Adam with bias correction, random square
patches, dihedral augmentation. One seeded run is bit-reproducible: the
initialization stream and the data stream are separate child seeds, batches
are drawn sequentially, and parameter updates sweep names in a fixed order.

Also hosts the finite-difference gradient checker used by `llfusion gradcheck`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from .datasets import Manifest, load_aligned_row
from .errors import NonFiniteGradient, ShapeError, TrainingAborted
from .model import engine as eg
from .model.checkpoint import AdamState, Checkpoint, save_checkpoint
from .model.engine import ParameterStore, Tensor
from .model.network import (
    ABLATION_MODES,
    FusionNet,
    ModelConfig,
    effective_fused,
    fused_width,
)
from .model.pca import PcaProjection, pca_fit, random_orthonormal_projection

PCA_CALIBRATION_PATCHES = 64
_CALIB_CHUNK = 8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    patch: int = 128
    iterations: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    ablation_mode: str = "cross_attention"
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patch < 16:
            raise ValueError("patch must be >= 16")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must be in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be > 0")
        if self.ablation_mode not in ABLATION_MODES:
            raise ValueError(f"unknown ablation_mode {self.ablation_mode!r}")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def mae_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"mae_loss: shapes differ ({pred.shape} vs {gt.shape})")
    return float(np.mean(np.abs(pred - gt)))


def _mae_graph(pred: Tensor, gt: np.ndarray, mask: np.ndarray | None) -> Tensor:
    """Graph-side MAE. With a validity mask (B,H,W,1) only covered pixels
    count; without one this is exactly the plain mean."""
    if pred.data.shape != gt.shape:
        raise ShapeError(f"loss: prediction {pred.data.shape} vs target {gt.shape}")
    diff = eg.t_abs(eg.sub(pred, Tensor(gt)))
    if mask is None:
        return eg.t_mean(diff)
    covered = float(mask.sum())
    if covered == 0.0:
        raise ValueError("validity mask excludes every pixel")
    return eg.scale(eg.t_sum(eg.mul(diff, Tensor(mask))), 1.0 / (covered * gt.shape[-1]))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params: ParameterStore, state: AdamState, cfg: TrainConfig) -> None:
    """Standard bias-corrected Adam; mutates params and state in place."""
    state.t += 1
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.learning_rate
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise ValueError(f"adam_step: gradient not populated for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# patch sampling and augmentation
# ---------------------------------------------------------------------------

def _rand_window(h: int, w: int, patch: int, rng: np.random.Generator) -> tuple[int, int]:
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image size {h}x{w}")
    oy = int(rng.integers(0, h - patch + 1))
    ox = int(rng.integers(0, w - patch + 1))
    return oy, ox


def _crop_stack(arrays, patch: int, rng: np.random.Generator):
    h, w = arrays[0].shape[:2]
    for a in arrays[1:]:
        if a.shape[:2] != (h, w):
            raise ShapeError("patch sampling requires spatially aligned inputs")
    oy, ox = _rand_window(h, w, patch, rng)
    return [a[oy : oy + patch, ox : ox + patch] for a in arrays]


def sample_patch(triple, patch: int, rng: np.random.Generator):
    """Crop the same random window from (low-light RGB, thermal, reference)."""
    return tuple(_crop_stack(list(triple), patch, rng))


def _apply_dihedral(a: np.ndarray, idx: int) -> np.ndarray:
    if idx >= 4:
        a = a[:, ::-1]
    return np.ascontiguousarray(np.rot90(a, idx % 4, axes=(0, 1)))


def _dihedral_stack(arrays, rng: np.random.Generator):
    for a in arrays:
        if a.shape[0] != a.shape[1]:
            raise ValueError(
                f"augment requires square patches (90-degree rotations), got {a.shape[:2]}"
            )
    idx = int(rng.integers(0, 8))
    return [_apply_dihedral(a, idx) for a in arrays]


def augment(triple, rng: np.random.Generator):
    """Apply one of the 8 dihedral transforms, drawn uniformly, to all three
    patches identically."""
    return tuple(_dihedral_stack(list(triple), rng))


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

class _RowBank:
    """Loads manifest rows on first use and keeps them resident (desk scale)."""

    def __init__(self, manifest: Manifest):
        if not manifest.rows:
            raise ValueError("manifest is empty")
        self.rows = manifest.rows
        self._loaded: dict[int, tuple] = {}
        self.any_mask = any(r.homography is not None for r in manifest.rows)

    def get(self, i: int):
        if i not in self._loaded:
            rgb, thermal, ref, mask = load_aligned_row(self.rows[i])
            if self.any_mask and mask is None:
                mask = np.ones(rgb.shape[:2] + (1,), dtype=np.float64)
            self._loaded[i] = (rgb, thermal, ref, mask)
        return self._loaded[i]


def draw_batch(bank: _RowBank, patch: int, batch_size: int, rng: np.random.Generator,
               augment_patches: bool = True):
    """Assemble one training batch; consumes the data stream deterministically.
    Returns (rgb, thermal, gt, mask-or-None), each (B, patch, patch, c)."""
    rgbs, ths, gts, masks = [], [], [], []
    for _ in range(batch_size):
        rgb, thermal, ref, mask = bank.get(int(rng.integers(0, len(bank.rows))))
        arrays = [rgb, thermal, ref] + ([mask] if bank.any_mask else [])
        crops = _crop_stack(arrays, patch, rng)
        if augment_patches:
            crops = _dihedral_stack(crops, rng)
        rgbs.append(crops[0])
        ths.append(crops[1])
        gts.append(crops[2])
        if bank.any_mask:
            masks.append(crops[3])
    mask_b = np.stack(masks) if bank.any_mask else None
    return np.stack(rgbs), np.stack(ths), np.stack(gts), mask_b


def calibrate_pca(model: FusionNet, bank: _RowBank, patch: int,
                  rng: np.random.Generator) -> PcaProjection:
    """One-time fit of the frozen channel-reduction on fused features from a
    64-patch pass with the randomly initialized upstream weights."""
    width = fused_width(model.cfg, model.mode)
    c_f = effective_fused(model.cfg, model.mode)
    samples = []
    done = 0
    while done < PCA_CALIBRATION_PATCHES:
        n = min(_CALIB_CHUNK, PCA_CALIBRATION_PATCHES - done)
        rgb_b, th_b, _, _ = draw_batch(bank, patch, n, rng, augment_patches=False)
        fused, _ = model.fused_features(Tensor(rgb_b), Tensor(th_b))
        samples.append(fused.data.reshape(-1, width))
        done += n
    return pca_fit(np.concatenate(samples, axis=0), c_f)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(manifest: Manifest, mcfg: ModelConfig, tcfg: TrainConfig, out_dir) -> Path:
    """PCA calibration, then `iterations` steps of sample -> augment ->
    forward -> MAE -> backward -> Adam. Writes `metrics.log` (one line per
    step: `step <n> loss <float> lr <float>`) and a rolling `checkpoint.ckpt`
    every `checkpoint_every` steps and at the end. Returns the checkpoint path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ckpt"
    log_path = out_dir / "metrics.log"

    bank = _RowBank(manifest)
    model = FusionNet(mcfg, tcfg.ablation_mode, seed=tcfg.seed)
    data_rng = np.random.default_rng([tcfg.seed, 1])

    proj = calibrate_pca(model, bank, tcfg.patch, data_rng)
    adam = AdamState.zeros_like(model.params)

    def snapshot(iteration: int):
        save_checkpoint(ckpt_path, Checkpoint(
            cfg=mcfg, mode=tcfg.ablation_mode, params=model.params,
            adam=adam, proj=proj, iteration=iteration,
        ))

    snapshot(0)  # last-good baseline; also the iterations=0 result
    with open(log_path, "w", buffering=1) as log:
        for t in range(1, tcfg.iterations + 1):
            rgb_b, th_b, gt_b, mask_b = draw_batch(bank, tcfg.patch, tcfg.batch_size, data_rng)
            pred = model.forward_batch(rgb_b, th_b, proj, clamp=False)
            loss_t = _mae_graph(pred, gt_b, mask_b)
            loss = float(loss_t.data)
            if not math.isfinite(loss):
                log.write(f"step {t} loss {loss} lr {tcfg.learning_rate:.12e} ABORT\n")
                raise TrainingAborted(
                    f"non-finite loss at step {t}; last good checkpoint: {ckpt_path}"
                )
            eg.backward(loss_t)
            model.params.fill_missing_grads()
            adam_step(model.params, adam, tcfg)
            model.params.zero_grad()
            log.write(f"step {t} loss {loss:.12e} lr {tcfg.learning_rate:.12e}\n")
            if t % tcfg.checkpoint_every == 0:
                snapshot(t)
    if tcfg.iterations % tcfg.checkpoint_every != 0 or tcfg.iterations == 0:
        snapshot(tcfg.iterations)
    return ckpt_path


def read_metrics_log(path) -> list[tuple[int, float]]:
    """Parse (step, loss) pairs out of a metrics log."""
    out = []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if len(parts) >= 4 and parts[0] == "step":
            out.append((int(parts[1]), float(parts[3])))
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckRow:
    name: str
    size: int
    checked: int
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    rows: list[GradCheckRow] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def max_rel_err(self) -> float:
        return max((r.max_rel_err for r in self.rows), default=0.0)

    def format(self) -> str:
        lines = [f"{'parameter':<28} {'size':>8} {'checked':>8} {'max rel err':>14}  status"]
        for r in self.rows:
            lines.append(
                f"{r.name:<28} {r.size:>8} {r.checked:>8} {r.max_rel_err:>14.3e}  "
                + ("ok" if r.passed else "FAIL")
            )
        lines.append(
            f"overall: {'PASS' if self.passed else 'FAIL'} "
            f"(max rel err {self.max_rel_err:.3e}, tolerance {self.tolerance:.1e})"
        )
        return "\n".join(lines)


def check_gradients(params: ParameterStore, loss_fn, tolerance: float = 1e-4,
                    step: float = 1e-5, probes_per_tensor: int = 8,
                    exhaustive_limit: int = 16, seed: int = 0,
                    tamper=None) -> GradCheckReport:
    """Compare analytic gradients against central differences of `loss_fn`.

    `loss_fn()` must evaluate the scalar loss from the current parameter
    values and, when asked, populate gradients. Tensors with at most
    `exhaustive_limit` entries are probed coordinate-by-coordinate, larger
    ones on a seeded random subset. Relative error uses a 1e-6 floor so
    exactly-zero gradients compare clean. `tamper(params)` is a test hook run
    after the analytic backward pass.
    """
    loss_t = loss_fn()
    eg.backward(loss_t)
    params.fill_missing_grads()
    if tamper is not None:
        tamper(params)
    analytic = {n: p.grad.copy() for n, p in params.items()}
    params.zero_grad()

    rng = np.random.default_rng([seed, 7])
    report = GradCheckReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= exhaustive_limit:
            idxs = np.arange(n)
        else:
            idxs = np.sort(rng.choice(n, size=min(probes_per_tensor, n), replace=False))
        a_flat = analytic[name].reshape(-1)
        max_rel = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            lp = float(loss_fn().data)
            flat[i] = orig - step
            lm = float(loss_fn().data)
            flat[i] = orig
            fd = (lp - lm) / (2.0 * step)
            rel = abs(a_flat[i] - fd) / max(abs(a_flat[i]), abs(fd), 1e-6)
            max_rel = max(max_rel, rel)
        report.rows.append(GradCheckRow(
            name=name, size=n, checked=len(idxs),
            max_rel_err=max_rel, passed=max_rel < tolerance,
        ))
    return report


def gradient_check(mcfg: ModelConfig, tolerance: float = 1e-4,
                   mode: str = "cross_attention", seed: int = 0,
                   step: float = 1e-5, probes_per_tensor: int = 8,
                   exhaustive_limit: int = 16, tamper=None) -> GradCheckReport:
    """Full-network gradient check on a random 8x8 input pair in double
    precision: analytic gradients of the training loss versus central
    differences, one report row per named parameter."""
    rng = np.random.default_rng([seed, 3])
    model = FusionNet(mcfg, mode, seed=seed)
    proj = random_orthonormal_projection(
        fused_width(mcfg, mode), effective_fused(mcfg, mode), rng
    )
    rgb = rng.uniform(0.0, 1.0, size=(1, 8, 8, 3))
    thermal = rng.uniform(0.0, 1.0, size=(1, 8, 8, 1))
    gt = rng.uniform(0.0, 1.0, size=(1, 8, 8, 3))

    def loss_fn():
        pred = model.forward_batch(rgb, thermal, proj, clamp=False)
        return _mae_graph(pred, gt, None)

    return check_gradients(
        model.params, loss_fn, tolerance=tolerance, step=step,
        probes_per_tensor=probes_per_tensor, exhaustive_limit=exhaustive_limit,
        seed=seed, tamper=tamper,
    )
