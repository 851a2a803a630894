"""Flat dotted-key experiment configuration.

One JSON object, no nesting, no templating: every key is declared below
with its type and default, unknown keys are rejected, and the canonical
serialization (sorted keys, fixed separators) round-trips bit-identically.
Scalar keys may carry a list of values in grid mode; the runner expands
the cartesian product into derived runs.
"""

from __future__ import annotations

import json

from maskdist.datasets import SyntheticDataset
from maskdist.distill import DistillConfig, InitStrategy, LossWeight
from maskdist.divergence import (
    DivergenceSpec,
    alpha_generator,
    jensen_shannon_generator,
    squared_hellinger_generator,
)
from maskdist.model import ModelConfig
from maskdist.teacher import TrainConfig


class ConfigError(ValueError):
    pass


# key -> (type, default); required keys have default None
SCHEMA: dict[str, tuple] = {
    "seed": (int, 0),
    "output_dir": (str, "runs"),
    "dataset.kind": (str, None),
    "dataset.seq_len": (int, None),
    "dataset.vocab_size": (int, None),
    "dataset.n_classes": (int, None),
    "dataset.seed": (int, 0),
    "dataset.sharpness": (float, 1.5),
    "dataset.delta": (bool, False),
    "dataset.concentration": (float, 0.3),
    "dataset.noise_rate": (float, 0.1),
    "model.d_model": (int, 64),
    "model.n_blocks": (int, 2),
    "model.n_heads": (int, 4),
    "schedule.kind": (str, "arccos"),
    "teacher.iterations": (int, 2000),
    "teacher.batch_size": (int, 64),
    "teacher.lr": (float, 1e-3),
    "teacher.cond_dropout": (float, 0.1),
    "teacher.ema_rate": (float, 0.9999),
    "teacher.warmup_steps": (int, 100),
    "teacher.log_every": (int, 50),
    "distill.iterations": (int, 3000),
    "distill.batch_size": (int, 32),
    "distill.lr_generator": (float, 2e-4),
    "distill.lr_auxiliary": (float, 2e-4),
    "distill.divergence": (str, "jeffrey"),
    "distill.jeffrey_beta": (float, 0.0),
    "distill.alpha": (float, 0.5),
    "distill.init_mask_ratio": (float, 0.6),
    "distill.init_sigma": (float, 0.0),
    "distill.init_placement": (str, "exact_count"),
    "distill.weight_mode": (str, "constant"),
    "distill.weight_delta": (float, 1e-3),
    "distill.cfg_scale": (float, 2.0),
    "distill.ema_rate": (float, 0.9999),
    "distill.warmup_steps": (int, 100),
    "distill.log_every": (int, 50),
    "distill.checkpoint_every": (int, 500),
    "eval.samples": (int, 20000),
    "eval.teacher_steps": (int, 8),
    "eval.temperature_grid": (list, [0.5, 1.0, 2.0]),
    "eval.n_init": (int, 256),
}

BETA_COMFORT_RANGE = (-0.3, 1.0)


def _coerce(key: str, value):
    typ = SCHEMA[key][0]
    if typ is list:
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) for v in value):
            raise ConfigError(f"config key {key!r} must be a list of numbers")
        return [float(v) for v in value]
    if isinstance(value, list):  # grid values for a scalar key
        return [_coerce_scalar(key, v, typ) for v in value]
    return _coerce_scalar(key, value, typ)


def _coerce_scalar(key, value, typ):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be a boolean")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key {key!r} must be a string")
        return value
    raise AssertionError(typ)


def parse_config(raw: dict) -> dict:
    """Validate a raw mapping against the schema and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = {}
    for key, value in raw.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value)
    for key, (_, default) in SCHEMA.items():
        if key in cfg:
            continue
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        cfg[key] = default
    return cfg


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}")
    return parse_config(raw)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """--set key=value flags; values parse as JSON, bare strings allowed."""
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, text = item.partition("=")
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        out[key] = _coerce(key, value)
    return out


def canonical_dumps(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def grid_keys(cfg: dict) -> list[str]:
    """Scalar-typed keys currently holding a list of grid values."""
    return sorted(
        k for k, v in cfg.items()
        if SCHEMA[k][0] is not list and isinstance(v, list)
    )


def expand_grid(cfg: dict) -> list[tuple[str, dict]]:
    """Cartesian expansion of grid keys into (subdir name, config) runs."""
    keys = grid_keys(cfg)
    if not keys:
        return [("", cfg)]
    runs = [("", dict(cfg))]
    for key in keys:
        nxt = []
        for name, base in runs:
            for value in cfg[key]:
                sub = dict(base)
                sub[key] = value
                tag = f"{key.split('.')[-1]}={value}"
                nxt.append((f"{name}/{tag}" if name else tag, sub))
        runs = nxt
    return runs


# --------------------------------------------------------------- resolution


def build_dataset(cfg: dict) -> SyntheticDataset:
    kind = cfg["dataset.kind"]
    common = dict(
        seq_len=cfg["dataset.seq_len"],
        vocab_size=cfg["dataset.vocab_size"],
        n_classes=cfg["dataset.n_classes"],
        seed=cfg["dataset.seed"],
    )
    if kind == "tabular":
        if cfg["dataset.delta"]:
            return SyntheticDataset.tabular_delta(**common)
        return SyntheticDataset.tabular(**common, sharpness=cfg["dataset.sharpness"])
    if kind == "markov_chain":
        return SyntheticDataset.markov_chain(
            **common, concentration=cfg["dataset.concentration"])
    if kind == "patterned":
        return SyntheticDataset.patterned(**common, noise_rate=cfg["dataset.noise_rate"])
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        vocab_size=cfg["dataset.vocab_size"],
        seq_len=cfg["dataset.seq_len"],
        n_classes=cfg["dataset.n_classes"],
        d_model=cfg["model.d_model"],
        n_blocks=cfg["model.n_blocks"],
        n_heads=cfg["model.n_heads"],
    )


def build_train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        iterations=cfg["teacher.iterations"],
        batch_size=cfg["teacher.batch_size"],
        lr=cfg["teacher.lr"],
        cond_dropout=cfg["teacher.cond_dropout"],
        schedule=cfg["schedule.kind"],
        seed=cfg["seed"],
        ema_rate=cfg["teacher.ema_rate"],
        warmup_steps=cfg["teacher.warmup_steps"],
        log_every=cfg["teacher.log_every"],
    )


def build_divergence(cfg: dict) -> DivergenceSpec:
    kind = cfg["distill.divergence"]
    if kind == "fkl":
        return DivergenceSpec.fkl()
    if kind == "rkl":
        return DivergenceSpec.rkl()
    if kind == "jeffrey":
        return DivergenceSpec.jeffrey(cfg["distill.jeffrey_beta"])
    if kind == "jensen_shannon":
        return DivergenceSpec.fdiv(jensen_shannon_generator())
    if kind == "squared_hellinger":
        return DivergenceSpec.fdiv(squared_hellinger_generator())
    if kind == "alpha":
        return DivergenceSpec.fdiv(alpha_generator(cfg["distill.alpha"]))
    raise ConfigError(f"unknown divergence {kind!r}")


def build_distill_config(cfg: dict) -> DistillConfig:
    return DistillConfig(
        iterations=cfg["distill.iterations"],
        batch_size=cfg["distill.batch_size"],
        lr_generator=cfg["distill.lr_generator"],
        lr_auxiliary=cfg["distill.lr_auxiliary"],
        divergence=build_divergence(cfg),
        init=InitStrategy(
            mask_ratio=cfg["distill.init_mask_ratio"],
            sigma=cfg["distill.init_sigma"],
            placement=cfg["distill.init_placement"],
        ),
        weight=LossWeight(cfg["distill.weight_mode"], cfg["distill.weight_delta"]),
        cfg_scale=cfg["distill.cfg_scale"],
        schedule=cfg["schedule.kind"],
        seed=cfg["seed"],
        ema_rate=cfg["distill.ema_rate"],
        warmup_steps=cfg["distill.warmup_steps"],
        log_every=cfg["distill.log_every"],
        checkpoint_every=cfg["distill.checkpoint_every"],
    )
