"""Manifests and geometric alignment.

A manifest is JSON Lines: the first line is a header object with a
`format_version` and the split tag, every following line is one record:

    {"format_version": 1, "split": "train"}
    {"id": "scene1", "rgb_low": "low/1.png", "thermal": "th/1.png",
     "rgb_ref": "ref/1.png", "homography": [h11, ..., h33]}

Relative paths resolve against the manifest's directory. `homography` is
optional (identity alignment implied) and stored as 9 floats row-major,
mapping thermal pixel coordinates (x, y, 1) into RGB pixel coordinates.
Unknown keys on a row are preserved on round trip.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError, ShapeError
from .imageio import load_rgb, load_thermal

MANIFEST_VERSION = 1
_DET_FLOOR = 1e-12


@dataclass
class ManifestRow:
    id: str
    rgb_low: str
    thermal: str
    rgb_ref: str
    homography: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not self.id:
            raise ManifestError("row with empty id")
        for f in ("rgb_low", "thermal", "rgb_ref"):
            if not getattr(self, f):
                raise ManifestError(f"row {self.id!r}: empty {f} path")
        if self.homography is not None:
            h = np.asarray(self.homography, dtype=np.float64)
            if h.shape != (3, 3):
                raise ManifestError(f"row {self.id!r}: homography must be 3x3")
            if abs(np.linalg.det(h)) <= _DET_FLOOR:
                raise ManifestError(f"row {self.id!r}: homography is singular")


@dataclass
class Manifest:
    rows: list[ManifestRow]
    split: str = "train"

    def validate(self) -> None:
        seen = set()
        for r in self.rows:
            r.validate()
            if r.id in seen:
                raise ManifestError(f"duplicate row id {r.id!r}")
            seen.add(r.id)


def load_manifest(path) -> Manifest:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty file (missing header line)")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:1: bad header: {e}") from e
    if header.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported format_version {header.get('format_version')!r}")
    base = path.parent
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ManifestError(f"{path}:{lineno}: bad record: {e}") from e
        try:
            rid = obj.pop("id")
            rgb_low = obj.pop("rgb_low")
            thermal = obj.pop("thermal")
            rgb_ref = obj.pop("rgb_ref")
        except KeyError as e:
            raise ManifestError(f"{path}:{lineno}: missing field {e}") from e
        hom = obj.pop("homography", None)
        if hom is not None:
            hom = np.asarray(hom, dtype=np.float64).reshape(3, 3)
        row = ManifestRow(
            id=str(rid),
            rgb_low=str(base / rgb_low),
            thermal=str(base / thermal),
            rgb_ref=str(base / rgb_ref),
            homography=hom,
            extra=obj,
        )
        rows.append(row)
    m = Manifest(rows=rows, split=str(header.get("split", "train")))
    m.validate()
    return m


def save_manifest(m: Manifest, path) -> None:
    m.validate()
    path = Path(path)
    with open(path, "w") as f:
        f.write(json.dumps({"format_version": MANIFEST_VERSION, "split": m.split}) + "\n")
        for r in m.rows:
            obj = {"id": r.id, "rgb_low": r.rgb_low, "thermal": r.thermal, "rgb_ref": r.rgb_ref}
            obj["homography"] = None if r.homography is None else [float(x) for x in r.homography.reshape(-1)]
            obj.update(r.extra)
            f.write(json.dumps(obj) + "\n")


def select_subset(items, stride: int):
    """Every stride-th element starting at index 0 (the paper-style 1-in-50
    subsetting); length is ceil(n / stride)."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    return list(items)[::stride]


# ---------------------------------------------------------------------------
# homography warping
# ---------------------------------------------------------------------------

def _inverse_map(h: np.ndarray, out_size: tuple[int, int]):
    """Source sample coordinates for every output pixel under inverse warp."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ShapeError(f"homography must be 3x3, got {h.shape}")
    det = np.linalg.det(h)
    if abs(det) <= _DET_FLOOR:
        raise ValueError("homography is singular")
    hinv = np.linalg.inv(h)
    out_h, out_w = out_size
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(out_h * out_w)])
    src = hinv @ pts
    wcoord = src[2]
    valid_w = np.abs(wcoord) > 1e-12
    sx = np.where(valid_w, src[0] / np.where(valid_w, wcoord, 1.0), -1.0)
    sy = np.where(valid_w, src[1] / np.where(valid_w, wcoord, 1.0), -1.0)
    return sx.reshape(out_h, out_w), sy.reshape(out_h, out_w)


def warp_homography(t: np.ndarray, h: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Inverse-warp a thermal frame into the RGB pixel grid.

    For each output pixel p, samples the input at H^-1 p with bilinear
    interpolation; samples falling outside the input are 0.
    """
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 2:
        t = t[:, :, None]
    in_h, in_w = t.shape[:2]
    sx, sy = _inverse_map(h, out_size)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    def gather(yy, xx):
        inside = (yy >= 0) & (yy < in_h) & (xx >= 0) & (xx < in_w)
        vals = t[np.clip(yy, 0, in_h - 1), np.clip(xx, 0, in_w - 1)]
        return vals * inside[..., None]

    w00 = ((1 - fy) * (1 - fx))[..., None]
    w01 = ((1 - fy) * fx)[..., None]
    w10 = (fy * (1 - fx))[..., None]
    w11 = (fy * fx)[..., None]
    out = (w00 * gather(y0, x0) + w01 * gather(y0, x0 + 1)
           + w10 * gather(y0 + 1, x0) + w11 * gather(y0 + 1, x0 + 1))
    return out


def warp_validity_mask(h: np.ndarray, in_size: tuple[int, int],
                       out_size: tuple[int, int]) -> np.ndarray:
    """1.0 where the inverse-warp sample point is fully interpolatable inside
    the input frame; 0.0 where the zero fill would leak into the output.
    Training excludes 0-pixels from the loss."""
    in_h, in_w = in_size
    sx, sy = _inverse_map(h, out_size)
    ok = (sx >= 0.0) & (sx <= in_w - 1.0) & (sy >= 0.0) & (sy <= in_h - 1.0)
    return ok.astype(np.float64)


def load_aligned_row(row: ManifestRow):
    """Load one manifest row, warping thermal onto the RGB grid when a
    homography is present. Returns (rgb_low, thermal, rgb_ref, mask-or-None)."""
    rgb = load_rgb(row.rgb_low)
    ref = load_rgb(row.rgb_ref)
    thermal = load_thermal(row.thermal)
    if rgb.shape != ref.shape:
        raise ShapeError(
            f"row {row.id!r}: low/reference shapes differ ({rgb.shape} vs {ref.shape})"
        )
    mask = None
    if row.homography is not None:
        out_size = rgb.shape[:2]
        in_size = thermal.shape[:2]
        thermal = warp_homography(thermal, row.homography, out_size)
        mask = warp_validity_mask(row.homography, in_size, out_size)[..., None]
    elif thermal.shape[:2] != rgb.shape[:2]:
        raise ShapeError(
            f"row {row.id!r}: thermal {thermal.shape[:2]} not aligned with rgb {rgb.shape[:2]} "
            "and no homography given"
        )
    return rgb, thermal, ref, mask


# ---------------------------------------------------------------------------
# V-TIEE exposure stacks
# ---------------------------------------------------------------------------

_EXP_RE = re.compile(r"^exp_(\d+)\.png$")


def pair_vtiee_stack(scene_dir, gain_level: str, input_exposure_index: int,
                     ref_exposure_index: int) -> ManifestRow:
    """Build a manifest row from an exposure-stack scene directory laid out as
    `scene_<id>/gain_<low|high>/exp_<k>.png` plus `scene_<id>/thermal.png`.

    The input index selects the short exposure used as the low-light frame,
    the reference index the well-exposed frame; both are explicit, never
    inferred from content.
    """
    scene_dir = Path(scene_dir)
    if gain_level not in ("low", "high"):
        raise ValueError(f"gain_level must be 'low' or 'high', got {gain_level!r}")
    gain_dir = scene_dir / f"gain_{gain_level}"
    if not gain_dir.is_dir():
        raise FileNotFoundError(f"missing gain directory: {gain_dir}")
    thermal = scene_dir / "thermal.png"
    if not thermal.exists():
        raise FileNotFoundError(f"missing thermal frame: {thermal}")

    stack: dict[int, Path] = {}
    for p in gain_dir.iterdir():
        m = _EXP_RE.match(p.name)
        if m:
            k = int(m.group(1))
            if k in stack:
                raise ValueError(f"{gain_dir}: duplicate exposure index {k}")
            stack[k] = p
    if not stack:
        raise FileNotFoundError(f"{gain_dir}: no exp_<k>.png frames found")
    indices = sorted(stack)
    for label, idx in (("input", input_exposure_index), ("reference", ref_exposure_index)):
        if idx not in stack:
            raise IndexError(
                f"{gain_dir}: {label} exposure index {idx} not in stack "
                f"(available: {indices})"
            )
    scene_id = scene_dir.name
    return ManifestRow(
        id=f"{scene_id}_{gain_level}_in{input_exposure_index}_ref{ref_exposure_index}",
        rgb_low=str(stack[input_exposure_index]),
        thermal=str(thermal),
        rgb_ref=str(stack[ref_exposure_index]),
        homography=None,
    )
