"""Run configuration: YAML file + command-line overrides -> one fully
resolved dict with a stable hash.

Schema (all keys optional in the file; defaults fill the rest):

    model:                # ModelConfig fields
      base_channels: 124
      heads: 4
      attention_blocks_per_branch: 1
      fused_channels: 124
      patch_train_size: 128
      ffn_expansion: 4
    train:                # TrainConfig fields
      learning_rate: 2.0e-4
      batch_size: 4
      patch: 128
      iterations: 2000
      adam_beta1: 0.9
      adam_beta2: 0.999
      adam_eps: 1.0e-8
      seed: 0
      ablation_mode: cross_attention   # cross_attention | self_only | concat4
      checkpoint_every: 500
    paths:
      train_manifest: ...
      test_manifest: ...
      checkpoint: ...
      output_dir: ...

Overrides use dotted keys: `--set train.iterations=100`. The resolved config
is snapshotted into the output dir by commands that write one, and its hash
(sha256 of the canonical JSON) is printed by every command.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import yaml

from .model.network import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = ("model", "train", "paths")
_PATH_KEYS = ("train_manifest", "test_manifest", "checkpoint", "output_dir")


def _defaults() -> dict:
    return {
        "model": ModelConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "paths": {k: None for k in _PATH_KEYS},
    }


def config_hash(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunConfig:
    resolved: dict
    model: ModelConfig
    train: TrainConfig
    paths: dict
    hash: str

    def snapshot(self, out_dir) -> Path:
        out = Path(out_dir) / "config_resolved.yaml"
        out.write_text(yaml.safe_dump(self.resolved, sort_keys=True))
        return out


def _apply_set(resolved: dict, expr: str) -> None:
    if "=" not in expr:
        raise ConfigError(f"--set needs key=value, got {expr!r}")
    key, _, raw = expr.partition("=")
    parts = key.strip().split(".")
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"--set key must be <section>.<field> with section in {_SECTIONS}, got {key!r}")
    section, fld = parts
    if fld not in resolved[section]:
        raise ConfigError(f"unknown config field {key!r}")
    resolved[section][fld] = yaml.safe_load(raw)


def load_run_config(config_path=None, sets: list[str] | None = None,
                    output_dir_override: str | None = None) -> RunConfig:
    resolved = _defaults()
    if config_path is not None:
        p = Path(config_path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            file_cfg = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: invalid YAML: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        for section, values in file_cfg.items():
            if section not in _SECTIONS:
                raise ConfigError(f"{p}: unknown section {section!r}")
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"{p}: section {section!r} must be a mapping")
            for k, v in values.items():
                if k not in resolved[section]:
                    raise ConfigError(f"{p}: unknown field {section}.{k}")
                resolved[section][k] = v
        # relative paths in the file resolve against the file's directory
        for k, v in resolved["paths"].items():
            if isinstance(v, str) and v and not Path(v).is_absolute():
                resolved["paths"][k] = str((p.parent / v).resolve())
    for expr in sets or []:
        _apply_set(resolved, expr)
    if output_dir_override:
        resolved["paths"]["output_dir"] = output_dir_override
    try:
        mcfg = ModelConfig.from_dict(resolved["model"])
        tcfg = TrainConfig.from_dict(resolved["train"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(
        resolved=resolved,
        model=mcfg,
        train=tcfg,
        paths=dict(resolved["paths"]),
        hash=config_hash(resolved),
    )
