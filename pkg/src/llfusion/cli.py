"""Single executable for the whole pipeline.

Subcommands: train, enhance, eval, degrade, ablate, gradcheck.
Exit codes: 0 success, 2 usage/config error, 3 runtime abort.
Every command prints the hash of its resolved configuration; identical hash
and seed reproduce outputs byte for byte.

Heavy imports stay inside the handlers so `--threads` (BLAS/OpenMP thread
cap) can take effect before numpy loads.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

OUTPUT_DIR_ENV = "LLFUSION_OUTPUT_DIR"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORT = 3


class _Lock:
    """One writer per output directory."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output dir is locked by another run (remove {self.path} if stale)"
            ) from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass
        return False


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="llfusion",
        description="Thermal-guided low-light image enhancement pipeline.",
    )
    ap.add_argument("--threads", type=int, default=None,
                    help="cap BLAS/OpenMP threads (takes effect on a fresh process)")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field, e.g. train.iterations=100")

    p = sub.add_parser("train", help="train a model from a manifest")
    add_config_args(p)

    p = sub.add_parser("enhance", help="enhance one RGB/thermal pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--thermal", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force-unit-illumination", action="store_true",
                   help="override the illumination map with 1.0 (identity-stub diagnostics)")

    p = sub.add_parser("eval", help="evaluate a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("degrade", help="make low-exposure noisy copies of reference images")
    p.add_argument("--input-dir", required=True)
    p.add_argument("--output-dir", required=True)
    p.add_argument("--exposure-low", type=float, default=5.0)
    p.add_argument("--exposure-high", type=float, default=20.0)
    p.add_argument("--factor", type=float, default=None,
                   help="fixed exposure factor (skips the per-image draw)")
    p.add_argument("--shot", type=float, default=None, help="shot-noise coefficient")
    p.add_argument("--read", type=float, default=None, help="read-noise coefficient")
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train/evaluate all three ablation variants")
    add_config_args(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter")
    add_config_args(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--probes", type=int, default=8,
                   help="sampled coordinates per large tensor")
    return ap


def _load_config(args):
    from .config import load_run_config
    return load_run_config(args.config, args.set, os.environ.get(OUTPUT_DIR_ENV))


def _require(value, what: str):
    if not value:
        raise ValueError(f"config is missing {what}")
    return value


def _cmd_train(args) -> int:
    from .datasets import load_manifest
    from .training import train
    rc = _load_config(args)
    print(f"config hash: {rc.hash}")
    manifest = load_manifest(_require(rc.paths.get("train_manifest"), "paths.train_manifest"))
    out_dir = Path(_require(rc.paths.get("output_dir"), "paths.output_dir"))
    with _Lock(out_dir):
        rc.snapshot(out_dir)
        ckpt = train(manifest, rc.model, rc.train, out_dir)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _cmd_enhance(args) -> int:
    import time

    import numpy as np

    from .config import config_hash
    from .imageio import load_rgb, load_thermal, save_image
    from .model.checkpoint import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    print("config hash: " + config_hash({
        "model": ck.cfg.to_dict(), "mode": ck.mode,
        "force_unit_illumination": bool(args.force_unit_illumination),
    }))
    rgb = load_rgb(args.rgb)
    thermal = load_thermal(args.thermal)
    model = ck.model()
    t0 = time.perf_counter()
    if args.force_unit_illumination:
        from .model import engine as eg
        from .model.network import reconstruct, pca_reduce_t
        from .model.engine import Tensor
        # identity illumination: skip the estimator's map, keep the rest
        ones = np.ones(rgb.shape[:2] + (1,))
        fused, _ = model.fused_features(Tensor(rgb[None]), Tensor(thermal[None]))
        lit = Tensor(rgb[None] * ones[None])
        out_t = reconstruct(pca_reduce_t(fused, ck.proj), lit, model.params)
        out = np.clip(out_t.data[0], 0.0, 1.0)
    else:
        out = model.forward(rgb, thermal, ck.proj, clamp=True)
    dt = time.perf_counter() - t0
    save_image(out, args.out)
    print(f"enhanced {rgb.shape[1]}x{rgb.shape[0]} in {dt:.3f}s -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .config import config_hash
    from .datasets import load_manifest
    from .metrics import evaluate
    manifest = load_manifest(args.manifest)
    report = evaluate(manifest, args.checkpoint, args.report)
    print(f"config hash: {report.config_hash}")
    failed = [r for r in report.rows if r.error is not None]
    print(f"evaluated {len(report.rows) - len(failed)}/{len(report.rows)} rows "
          f"(mean PSNR {report.mean_psnr_db:.3f} dB, mean SSIM {report.mean_ssim:.4f})")
    for r in failed:
        print(f"  failed {r.id}: {r.error}", file=sys.stderr)
    return EXIT_OK


def _cmd_degrade(args) -> int:
    import numpy as np

    from .config import config_hash
    from .datasets import Manifest, ManifestRow, save_manifest
    from .degradation import (DEFAULT_READ_COEFF, DEFAULT_SHOT_COEFF,
                              DegradeParams, degrade, sample_exposure_factor)
    from .imageio import load_rgb, save_image

    in_dir = Path(args.input_dir)
    out_dir = Path(args.output_dir)
    shot = 0.0 if args.no_noise else (DEFAULT_SHOT_COEFF if args.shot is None else args.shot)
    read = 0.0 if args.no_noise else (DEFAULT_READ_COEFF if args.read is None else args.read)
    print("config hash: " + config_hash({
        "input_dir": str(in_dir), "exposure": [args.exposure_low, args.exposure_high],
        "factor": args.factor, "shot": shot, "read": read, "seed": args.seed,
    }))

    refs = sorted(p for p in in_dir.glob("*.png") if not p.stem.endswith("_thermal"))
    if not refs:
        raise ValueError(f"no reference PNGs in {in_dir}")
    missing = [p.name for p in refs if not (in_dir / f"{p.stem}_thermal.png").exists()]
    if missing:
        raise ValueError(
            "missing thermal partners (<stem>_thermal.png) for: " + ", ".join(missing)
        )

    with _Lock(out_dir):
        rng = np.random.default_rng(args.seed)
        rows = []
        for i, ref_path in enumerate(refs):
            factor = args.factor if args.factor is not None else sample_exposure_factor(
                rng, args.exposure_low, args.exposure_high
            )
            params = DegradeParams(exposure_factor=factor, shot_coeff=shot,
                                   read_coeff=read, seed=args.seed)
            low = degrade(load_rgb(ref_path), params, image_index=i)
            low_path = out_dir / f"{ref_path.stem}_low.png"
            save_image(low, low_path)
            rows.append(ManifestRow(
                id=ref_path.stem,
                rgb_low=str(low_path),
                thermal=str(in_dir / f"{ref_path.stem}_thermal.png"),
                rgb_ref=str(ref_path),
                homography=None,
                extra={"exposure_factor": float(factor)},
            ))
        manifest_path = out_dir / "manifest.jsonl"
        save_manifest(Manifest(rows=rows, split="train"), manifest_path)
    print(f"degraded {len(rows)} images -> {manifest_path}")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from dataclasses import replace

    from .datasets import load_manifest
    from .metrics import evaluate
    from .training import train

    rc = _load_config(args)
    print(f"config hash: {rc.hash}")
    train_manifest = load_manifest(_require(rc.paths.get("train_manifest"), "paths.train_manifest"))
    test_manifest = load_manifest(_require(rc.paths.get("test_manifest"), "paths.test_manifest"))
    out_dir = Path(_require(rc.paths.get("output_dir"), "paths.output_dir"))

    results = []
    with _Lock(out_dir):
        rc.snapshot(out_dir)
        for mode in ("self_only", "concat4", "cross_attention"):
            tcfg = replace(rc.train, ablation_mode=mode)
            mode_dir = out_dir / mode
            ckpt = train(train_manifest, rc.model, tcfg, mode_dir)
            report = evaluate(test_manifest, ckpt, mode_dir / "report.csv")
            results.append((mode, report.mean_psnr_db, report.mean_ssim))
        table = ["mode,psnr_db,ssim"]
        table += [f"{m},{p:.6f},{s:.6f}" for m, p, s in results]
        (out_dir / "ablation.csv").write_text("\n".join(table) + "\n")
    print(f"{'mode':<18} {'PSNR (dB)':>10} {'SSIM':>8}")
    for m, p, s in results:
        print(f"{m:<18} {p:>10.3f} {s:>8.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from .training import gradient_check
    rc = _load_config(args)
    print(f"config hash: {rc.hash}")
    report = gradient_check(
        rc.model, tolerance=args.tolerance, mode=rc.train.ablation_mode,
        seed=rc.train.seed, probes_per_tensor=args.probes,
    )
    print(report.format())
    return EXIT_OK if report.passed else EXIT_ABORT


_HANDLERS = {
    "train": _cmd_train,
    "enhance": _cmd_enhance,
    "eval": _cmd_eval,
    "degrade": _cmd_degrade,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return EXIT_OK
    except Exception as e:
        from .errors import NonFiniteGradient, TrainingAborted
        if isinstance(e, (TrainingAborted, NonFiniteGradient)):
            print(f"error: {e}", file=sys.stderr)
            return EXIT_ABORT
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


def entry() -> None:
    sys.exit(main())
