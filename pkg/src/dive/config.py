"""Layered run configuration: file < ``DIVE_`` environment < command-line flags.

``toy-demo`` inserts :data:`TOY_PROFILE` between the defaults and the file:
the toy denoiser's projections are too narrow for the default adapter rank
and it needs a larger step size than the default to converge in minutes.

Config files are flat ``key = value`` lines; ``#`` starts a comment.  Every
accepted key is listed in :data:`KEY_DOCS`; the environment variable for
key ``learning_rate`` is ``DIVE_LEARNING_RATE``.
"""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path
from typing import Mapping

from .sampling import SamplerConfig
from .training import PretrainConfig, TrainConfig

__all__ = ["ConfigError", "read_config_file", "env_overrides", "layered", "write_snapshot",
           "train_config", "pretrain_config", "sampler_config", "default", "KEY_DOCS",
           "ENV_PREFIX", "TOY_PROFILE"]

ENV_PREFIX = "DIVE_"


class ConfigError(ValueError):
    pass


# One line of help per accepted key; the CLI prints this table in --help.
KEY_DOCS: dict[str, str] = {
    # fine-tuning
    "learning_rate": "Adam step size for identity rows and adapters",
    "batch_size": "images per optimization step",
    "total_steps": "optimization steps",
    "image_size": "HxW, both multiples of 4",
    "horizontal_flip": "random left-right flips during training",
    "seed": "master seed",
    "checkpoint_every": "steps between checkpoints",
    "lora_rank": "rank of the Q/K/V adapters",
    "lora_scale": "multiplier of the adapter update",
    "view_granularity": "camera (one token per camera) or modality (one per modality)",
    # base pretraining
    "pretrain_steps": "steps of base denoiser pretraining",
    "pretrain_batch_size": "batch size of base pretraining",
    "pretrain_learning_rate": "peak learning rate of base pretraining",
    # sampling and expansion
    "sampler_steps": "solver steps per generated image",
    "sampler_method": "multistep_2nd_order or first_order",
    "images_per_view": "synthetic images per (identity, infrared view) cell",
    "min_images": "external identities need strictly more images than this",
    "id_offset": "added to external identity labels (default: max VI id + 1)",
    "jobs": "concurrent expansion cells",
    # toy corpus
    "toy_vi_identities": "identities in the toy VI corpus",
    "toy_ext_identities": "identities in the toy external corpus",
    "toy_per_view": "images per identity and camera in the toy corpora",
}

_DEFAULTS = {
    **{f.name: f.default for f in fields(TrainConfig)},
    "pretrain_steps": PretrainConfig.steps,
    "pretrain_batch_size": PretrainConfig.batch_size,
    "pretrain_learning_rate": PretrainConfig.learning_rate,
    "sampler_steps": SamplerConfig.steps,
    "sampler_method": SamplerConfig.method.value,
    "images_per_view": 18,
    "min_images": 0,
    "id_offset": -1,
    "jobs": 1,
    "toy_vi_identities": 8,
    "toy_ext_identities": 8,
    "toy_per_view": 3,
}
assert set(_DEFAULTS) == set(KEY_DOCS)

TOY_PROFILE: dict[str, object] = {
    "learning_rate": 1e-3,
    "lora_rank": 32,
    "total_steps": 1500,
}


def default(key: str):
    return _DEFAULTS[key]


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEY_DOCS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for name, value in environ.items():
        if name.startswith(ENV_PREFIX):
            key = name[len(ENV_PREFIX):].lower()
            if key in KEY_DOCS:
                out[key] = value
    return out


def _coerce(key: str, value):
    ref = _DEFAULTS[key]
    if not isinstance(value, str):
        return tuple(value) if isinstance(ref, tuple) else value
    text = value.strip()
    try:
        if isinstance(ref, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(ref, int):
            return int(text)
        if isinstance(ref, float):
            return float(text)
        if isinstance(ref, tuple):
            return tuple(int(p) for p in text.lower().replace("x", ",").split(",") if p)
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {key}") from None
    return text


def layered(file_values: Mapping[str, object] | None = None,
            env_values: Mapping[str, object] | None = None,
            flag_values: Mapping[str, object] | None = None,
            profile: Mapping[str, object] | None = None) -> dict[str, object]:
    """Effective configuration; later layers win, ``None`` flags are ignored.

    ``profile`` sits just above the built-in defaults.
    """
    out = dict(_DEFAULTS)
    for layer in (profile or {}, file_values or {}, env_values or {}, flag_values or {}):
        for key, value in layer.items():
            if value is None:
                continue
            if key not in KEY_DOCS:
                raise ConfigError(f"unknown key {key!r}")
            out[key] = _coerce(key, value)
    return out


def train_config(cfg: Mapping[str, object]) -> TrainConfig:
    return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})


def pretrain_config(cfg: Mapping[str, object]) -> PretrainConfig:
    return PretrainConfig(steps=cfg["pretrain_steps"], batch_size=cfg["pretrain_batch_size"],
                          learning_rate=cfg["pretrain_learning_rate"], seed=cfg["seed"],
                          image_size=cfg["image_size"])


def sampler_config(cfg: Mapping[str, object]) -> SamplerConfig:
    return SamplerConfig(steps=cfg["sampler_steps"], method=cfg["sampler_method"],
                         seed=cfg["seed"])


def _render(value) -> str:
    if isinstance(value, tuple):
        return "x".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def write_snapshot(cfg: Mapping[str, object], out_dir: str | Path, command: str,
                   extra: Mapping[str, object] | None = None) -> Path:
    """Write ``effective-config.txt``: readable back by :func:`read_config_file`
    (inputs such as paths are kept as comments)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"# dive {command}"]
    for key, value in sorted((extra or {}).items()):
        lines.append(f"# {key}: {value}")
    lines += [f"{k} = {_render(cfg[k])}" for k in sorted(cfg)]
    path = out_dir / "effective-config.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path

