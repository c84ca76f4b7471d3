"""Single-file checkpoint archive.

Byte layout (version 1), documented here and in docs/checkpoint_format.md:

    bytes 0..7    magic b"LLFUSCKP"
    bytes 8..11   format version, uint32 little-endian (currently 1)
    bytes 12..19  header length N, uint64 little-endian
    bytes 20..20+N-1
                  header: canonical JSON (UTF-8, sorted keys, no whitespace)
    remainder     payload: raw little-endian float64 arrays, concatenated

The header records the model config, wiring mode, iteration counter, the PCA
explained-variance fraction, and for every array in the payload its name,
shape and byte offset. Payload order: parameter values (architecture order),
Adam first moments, Adam second moments, PCA mean, PCA basis. Writing the
same state twice produces identical bytes; load(save(s)) == s bit-exactly.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError
from .engine import ParameterStore
from .network import ABLATION_MODES, FusionNet, ModelConfig, parameter_shapes
from .pca import PcaProjection

MAGIC = b"LLFUSCKP"
FORMAT_VERSION = 1


@dataclass
class AdamState:
    """Optimizer slots paired with the parameter store."""
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ParameterStore) -> "AdamState":
        return cls(
            m={n: np.zeros_like(p.data) for n, p in params.items()},
            v={n: np.zeros_like(p.data) for n, p in params.items()},
            t=0,
        )


@dataclass
class Checkpoint:
    cfg: ModelConfig
    mode: str
    params: ParameterStore
    adam: AdamState
    proj: PcaProjection
    iteration: int

    def model(self) -> FusionNet:
        return FusionNet(self.cfg, self.mode, params=self.params)


def _le64(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Atomic write (tmp + rename) so an aborted run keeps its last good file."""
    names = [n for n, _ in parameter_shapes(ck.cfg, ck.mode)]
    if names != ck.params.names():
        raise ValueError("parameter store does not match the architecture layout")

    blobs: list[bytes] = []
    index: list[dict] = []
    offset = 0

    def put(name: str, arr: np.ndarray):
        nonlocal offset
        raw = _le64(arr)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)

    for n, p in ck.params.items():
        put(f"param:{n}", p.data)
    for n in names:
        put(f"adam_m:{n}", ck.adam.m[n])
    for n in names:
        put(f"adam_v:{n}", ck.adam.v[n])
    put("pca:mean", ck.proj.mean)
    put("pca:basis", ck.proj.basis)

    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ck.cfg.to_dict(),
        "ablation_mode": ck.mode,
        "iteration": ck.iteration,
        "adam_t": ck.adam.t,
        "pca_explained_variance_fraction": ck.proj.explained_variance_fraction,
        "arrays": index,
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(FORMAT_VERSION).tobytes())
        f.write(np.uint64(len(hjson)).tobytes())
        f.write(hjson)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version = int(np.frombuffer(data[8:12], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format version {version}")
    hlen = int(np.frombuffer(data[12:20], dtype="<u8")[0])
    header = json.loads(data[20 : 20 + hlen].decode("utf-8"))
    payload = data[20 + hlen :]

    def get(entry) -> np.ndarray:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=start)
        return arr.reshape(shape).astype(np.float64)

    arrays = {e["name"]: get(e) for e in header["arrays"]}

    cfg = ModelConfig.from_dict(header["model_config"])
    mode = header["ablation_mode"]
    if mode not in ABLATION_MODES:
        raise FormatError(f"{path}: unknown ablation mode {mode!r}")

    store = ParameterStore()
    m: dict[str, np.ndarray] = {}
    v: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg, mode):
        vals = arrays.get(f"param:{name}")
        if vals is None or vals.shape != shape:
            raise FormatError(f"{path}: missing or misshaped parameter {name!r}")
        store.add(name, vals)
        m[name] = arrays[f"adam_m:{name}"]
        v[name] = arrays[f"adam_v:{name}"]

    proj = PcaProjection(
        mean=arrays["pca:mean"],
        basis=arrays["pca:basis"],
        explained_variance_fraction=header["pca_explained_variance_fraction"],
    )
    return Checkpoint(
        cfg=cfg,
        mode=mode,
        params=store,
        adam=AdamState(m=m, v=v, t=int(header["adam_t"])),
        proj=proj,
        iteration=int(header["iteration"]),
    )
