"""Run configuration: defaults, YAML files, dotted overrides and run directories."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

import yaml

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "run_root": "runs",
    "dataset": {
        "name": "synthetic-imu",
        "root": "data",
        "n_unseen": 3,
        "folds": 4,
        "subject_wise": False,
        "synthetic": {"n_subjects": 4, "seconds": 30.0, "noise": 0.3, "seed": 0},
    },
    "text": {
        "mode": "fused",  # fused | template (prompt engineering off)
        "backend": "toy",
        "path": None,
        "embed_dim": 64,
        "width": 64,
        "layers": 1,
        "heads": 4,
        "encoder_seed": 0,
        "n_ctx": 8,
        "init_std": 0.02,
        "attn_init_scale": 10.0,
        "prompt_file": None,
    },
    "iot": {"architecture": "transformer", "patch": 8, "width": 64, "depth": 2, "heads": 4, "feature_dim": 64},
    "train": {"temperature": 0.2, "batch_size": 64, "learning_rate": 0.001, "momentum": 0.9,
              "weight_decay": 0.0, "epochs": 100, "select_best": True, "text_lr_scale": 0.1},
    "augment": {"enabled": True, "noise_dim": 32, "gen_hidden": [256, 256], "critic_hidden": [256, 256],
                "xi": 10.0, "critic_steps": 5, "n_aug": None, "gan_lr": 0.002, "gan_epochs": 30,
                "batch_size": 64, "cls_weight": 1.0, "filter_synthetic": True,
                "finetune_epochs": 10, "finetune_lr": 0.001},
    "specialist": {"epochs": 300, "lr": 0.01, "weight_decay": 0.0001},
    "detector": {"k_fraction": 0.08, "retention": 0.8},
    "baselines": {"msp_epochs": 40, "msp_lr": 0.001, "knn_epochs": 40, "knn_noise_std": 0.1,
                  "mcm_temperature": None},
    "eval": {"folds": None, "workers": 1, "open_set": True},
}

# per-dataset departures from DEFAULTS
DATASET_PRESETS: dict[str, dict] = {
    "usc-had": {"dataset": {"name": "usc-had", "n_unseen": 3, "folds": 4}},
    "pamap2": {"dataset": {"name": "pamap2", "n_unseen": 3, "folds": 4}},
    "mmfi-mmwave": {"dataset": {"name": "mmfi-mmwave", "n_unseen": 5, "folds": 5},
                    "detector": {"retention": 0.75}},
    "mmfi-wifi": {"dataset": {"name": "mmfi-wifi", "n_unseen": 5, "folds": 5}},
    "synthetic-imu": {"dataset": {"name": "synthetic-imu", "folds": 3}},
    "synthetic-mmwave": {"dataset": {"name": "synthetic-mmwave", "folds": 3}, "detector": {"retention": 0.75}},
    "synthetic-wifi": {"dataset": {"name": "synthetic-wifi", "folds": 3}},
}


def _merge(base: dict, upd: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    unknown = []
    for k, v in upd.items():
        if k not in out:
            unknown.append(f"{path}{k}")
            continue
        if isinstance(out[k], dict) and isinstance(v, dict):
            try:
                out[k] = _merge(out[k], v, f"{path}{k}.")
            except ConfigError as e:
                unknown.extend(getattr(e, "keys", []))
        else:
            out[k] = v
    if unknown:
        err = ConfigError(f"unknown config keys: {', '.join(unknown)}")
        err.keys = unknown
        raise err
    return out


def default_config(dataset: str = "synthetic-imu") -> dict:
    if dataset not in DATASET_PRESETS:
        raise ConfigError(f"no preset for dataset {dataset!r}; choose from {sorted(DATASET_PRESETS)}")
    return _merge(DEFAULTS, DATASET_PRESETS[dataset])


def _parse_value(s: str):
    return yaml.safe_load(s)


def apply_overrides(cfg: dict, overrides: Iterable[str]) -> dict:
    """Apply ``a.b.c=value`` strings; values are parsed as YAML scalars/lists."""
    upd: dict = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, val = item.split("=", 1)
        node = upd
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(val)
    return _merge(cfg, upd)


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), dataset: str | None = None) -> dict:
    """Defaults, then the dataset preset, then the YAML file, then dotted overrides."""
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
    name = dataset or raw.get("dataset", {}).get("name") or DEFAULTS["dataset"]["name"]
    cfg = default_config(name) if name in DATASET_PRESETS else copy.deepcopy(DEFAULTS)
    cfg = _merge(cfg, raw)
    cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    if cfg["train"]["temperature"] <= 0:
        raise ConfigError("train.temperature must be positive")
    if not 0 < cfg["detector"]["retention"] <= 1:
        raise ConfigError("detector.retention must be in (0, 1]")
    if cfg["text"]["mode"] not in ("fused", "template"):
        raise ConfigError("text.mode must be 'fused' or 'template'")
    if cfg["augment"]["xi"] <= 0:
        raise ConfigError("augment.xi must be positive")
    if cfg["dataset"]["folds"] < 1 or cfg["dataset"]["n_unseen"] < 1:
        raise ConfigError("dataset.folds and dataset.n_unseen must be >= 1")


def config_hash(cfg: dict) -> str:
    """Hash of the resolved config without paths that do not affect results."""
    c = copy.deepcopy(cfg)
    c.pop("run_root", None)
    c["eval"].pop("workers", None)
    c["eval"].pop("folds", None)
    return hashlib.sha256(json.dumps(c, sort_keys=True).encode()).hexdigest()[:12]


def run_dir(cfg: dict) -> Path:
    return Path(cfg["run_root"]) / f"{cfg['dataset']['name']}-{config_hash(cfg)}-s{cfg['seed']}"


def save_snapshot(cfg: dict, directory: str | Path) -> Path:
    p = Path(directory) / "config.yaml"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return p
