"""Experiment configuration: JSON loading with typo safety, validation,
canonical hashing, and the ablation grid schema.

A config file is a flat JSON object of TrainConfig fields plus the
optional keys ``dataset`` (object), ``eval_every``, ``out_dir`` and
``grid`` (list of {split_global, split_local, transformer_on,
codebook_total[, label]}). Unknown keys are rejected. A minimal file is
``{"seed": 7}``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .model import TrainConfig
from . import tensor_io


class ConfigError(ValueError):
    pass


@dataclass
class GridEntry:
    split_global: int
    split_local: int
    transformer_on: bool
    codebook_total: int
    label: str = ""

    def to_dict(self):
        return {"split_global": self.split_global, "split_local": self.split_local,
                "transformer_on": self.transformer_on, "codebook_total": self.codebook_total,
                "label": self.label}


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: dict = field(default_factory=dict)
    eval_every: int = 100
    out_dir: str | None = None
    grid: list = field(default_factory=list)
    fid_features: str = "latent"            # or "pixels"

    def to_dict(self) -> dict:
        out = self.train.to_dict()
        out["dataset"] = dict(self.dataset)
        out["eval_every"] = self.eval_every
        out["out_dir"] = self.out_dir
        out["grid"] = [g.to_dict() for g in self.grid]
        out["fid_features"] = self.fid_features
        return out


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_TOP_FIELDS = {"dataset", "eval_every", "out_dir", "grid", "fid_features"}
_DATASET_FIELDS = {"kind", "seed", "n", "size", "path"}
_GRID_FIELDS = {"split_global", "split_local", "transformer_on", "codebook_total", "label"}


def _fill_defaults(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - _TRAIN_FIELDS - _TOP_FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    train_kwargs = {k: v for k, v in raw.items() if k in _TRAIN_FIELDS}
    try:
        train = TrainConfig.from_dict(train_kwargs)
    except TypeError as e:
        raise ConfigError(str(e)) from None

    dataset = dict(raw.get("dataset") or {})
    unknown = set(dataset) - _DATASET_FIELDS
    if unknown:
        raise ConfigError(f"unknown dataset keys: {sorted(unknown)}")
    dataset.setdefault("kind", "synthetic")
    if dataset["kind"] == "synthetic":
        dataset.setdefault("seed", train.seed)
        dataset.setdefault("n", 256)
        dataset.setdefault("size", train.image_size)
        if int(dataset["size"]) != train.image_size:
            raise ConfigError(
                f"dataset size {dataset['size']} does not match image_size {train.image_size}"
            )
    elif dataset["kind"] == "ppm_dir":
        if "path" not in dataset:
            raise ConfigError("dataset kind 'ppm_dir' needs a 'path'")
    else:
        raise ConfigError(f"unknown dataset kind {dataset['kind']!r}")

    grid = []
    for i, entry in enumerate(raw.get("grid") or []):
        unknown = set(entry) - _GRID_FIELDS
        if unknown:
            raise ConfigError(f"grid entry {i}: unknown keys {sorted(unknown)}")
        missing = {"split_global", "split_local", "transformer_on", "codebook_total"} - set(entry)
        if missing:
            raise ConfigError(f"grid entry {i}: missing keys {sorted(missing)}")
        grid.append(GridEntry(split_global=int(entry["split_global"]),
                              split_local=int(entry["split_local"]),
                              transformer_on=bool(entry["transformer_on"]),
                              codebook_total=int(entry["codebook_total"]),
                              label=str(entry.get("label", f"grid{i}"))))

    cfg = ExperimentConfig(train=train, dataset=dataset,
                           eval_every=int(raw.get("eval_every", 100)),
                           out_dir=raw.get("out_dir"), grid=grid,
                           fid_features=raw.get("fid_features", "latent"))
    if cfg.eval_every < 1:
        raise ConfigError(f"eval_every must be positive, got {cfg.eval_every}")
    if cfg.fid_features not in ("latent", "pixels"):
        raise ConfigError(f"fid_features must be 'latent' or 'pixels', got {cfg.fid_features!r}")
    try:
        train.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    for i, g in enumerate(cfg.grid):
        derived = apply_grid_entry(cfg, g)
        try:
            derived.train.validate()
        except ValueError as e:
            raise ConfigError(f"grid entry {i} ({g.label}): {e}") from None
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: parse error at line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return _fill_defaults(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    return _fill_defaults(copy.deepcopy(raw))


def apply_grid_entry(cfg: ExperimentConfig, entry: GridEntry) -> ExperimentConfig:
    """Derive a run config from the base by overriding the ablation axes."""
    derived = config_from_dict({k: v for k, v in cfg.to_dict().items() if k != "grid"})
    derived.train.split_global = entry.split_global
    derived.train.split_local = entry.split_local
    derived.train.transformer_on = entry.transformer_on
    derived.train.codebook_total = entry.codebook_total
    derived.train.quantizer_mode = "dual"
    return derived


def experiment_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that shapes a run's trajectory (output paths and
    the grid do not)."""
    d = cfg.to_dict()
    d.pop("out_dir", None)
    d.pop("grid", None)
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_echo(cfg: ExperimentConfig, out_dir: str) -> str:
    path = os.path.join(out_dir, "config.json")
    tensor_io.atomic_write_bytes(path, json.dumps(cfg.to_dict(), indent=1, sort_keys=True).encode())
    return path
