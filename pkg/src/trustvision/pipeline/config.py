"""Key-value pipeline configuration.

The file is INI-style; every key has a typed default below.  Any key can
be overridden by an environment variable ``TRUSTVISION_<SECTION>_<KEY>``
(upper case), which wins over the file::

    [pretrain]
    steps = 1000
    batch_size = 32

    TRUSTVISION_PRETRAIN_STEPS=200 trustvision pretrain ...
"""

from __future__ import annotations

import configparser
import copy
import os

from ..nnkit.optim import OptimHyper
from ..nnkit.vit import ArchConfig
from .synth import SynthConfig

ENV_PREFIX = "TRUSTVISION_"

DEFAULTS: dict[str, dict] = {
    "synth": {"num_classes": 12, "examples_per_class": 60, "image_size": 32, "intra_class_variation": 1.0,
              "noise": 0.05, "channels": 1, "seed": 0, "family_seed": 0},
    "model": {"patch_size": 4, "embed_dim": 64, "depth": 2, "heads": 2, "mlp_ratio": 4.0, "decoder_dim": 32,
              "decoder_depth": 1, "mask_ratio": 0.75, "pool": "mean", "drop_path": 0.1,
              "norm_pix_loss": True},
    "pretrain": {"steps": 1000, "batch_size": 32, "lr": 2e-3, "weight_decay": 0.05, "seed": 0},
    "finetune": {"epochs": 10, "batch_size": 16, "lr": 5e-4, "weight_decay": 0.02, "layerwise_decay": 0.75,
                 "per_class_test": 20, "seed": 0},
    "kshot": {"trials": 5, "seed": 0, "epochs": 10},
    "trust": {"alpha": 0.05, "target_tpr": 0.95, "temperatures": "0.02,0.1,0.5,1,2"},
}


class ConfigError(ValueError):
    pass


def _coerce(default, raw: str, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def load_config(path=None, env=None) -> dict[str, dict]:
    """Defaults, then the file at ``path`` (if any), then environment overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                cfg[section][key] = _coerce(DEFAULTS[section][key], raw, f"{section}.{key}")
    env = os.environ if env is None else env
    for section, values in cfg.items():
        for key in values:
            var = f"{ENV_PREFIX}{section}_{key}".upper()
            if var in env:
                values[key] = _coerce(DEFAULTS[section][key], env[var], var)
    return cfg


def dump_config(cfg: dict[str, dict]) -> str:
    parser = configparser.ConfigParser()
    for section, values in cfg.items():
        parser[section] = {k: str(v) for k, v in values.items()}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
        lines.append("")
    return "\n".join(lines)


def arch_from_config(cfg: dict, num_classes: int = 0) -> ArchConfig:
    m, s = cfg["model"], cfg["synth"]
    return ArchConfig(image_size=s["image_size"], in_chans=s["channels"], num_classes=num_classes, **m)


def synth_from_config(cfg: dict, **overrides) -> SynthConfig:
    values = dict(cfg["synth"])
    values.update(overrides)
    return SynthConfig(**values)


def pretrain_hyper(cfg: dict) -> OptimHyper:
    p = cfg["pretrain"]
    return OptimHyper(base_lr=p["lr"], weight_decay=p["weight_decay"], layerwise_decay=1.0, betas=(0.9, 0.95))


def finetune_hyper(cfg: dict) -> OptimHyper:
    f = cfg["finetune"]
    return OptimHyper(base_lr=f["lr"], weight_decay=f["weight_decay"], layerwise_decay=f["layerwise_decay"])


def temperatures(cfg: dict) -> tuple[float, ...]:
    return tuple(float(t) for t in str(cfg["trust"]["temperatures"]).split(",") if t.strip())
