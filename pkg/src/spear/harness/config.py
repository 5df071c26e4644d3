"""Experiment configuration: one flat ``key = value`` file plus command-line overrides."""

from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from ..sampler import SamplerConfig

DATA_SOURCES = ("synthetic-gaussian", "csv", "raw")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # network
    input_dim: int = 64
    width: int = 128
    depth: int = 4
    num_classes: int = 10
    batch_size: int = 4
    layer: int = 1
    # data
    data_source: str = "synthetic-gaussian"
    data_path: Optional[str] = None
    data_range: tuple = (0.0, 1.0)
    # sampler / selector
    max_samples: int = 100_000
    chunk_size: int = 10_000
    p_fr: float = 1e-5
    tau: Optional[float] = None
    zero_rel_tol: float = 1e-9
    angle_tol: Optional[float] = None
    robust_mode: bool = False
    noise_mult: float = 3.0
    noise_rank_mult: float = 2.0
    accept_lambda: Optional[float] = None
    rank_rel_tol: float = 1e-6
    # DPSGD
    clip_norm: Optional[float] = None
    noise_sigma: float = 0.0
    noise_rel: float = 0.0
    # FedAvg
    fedavg_epochs: int = 0
    fedavg_lr: float = 0.01
    fedavg_mini_batch: Optional[int] = None
    # run
    seed: int = 0
    trials: int = 20
    recovery_tol: float = 1e-6
    out: str = "results"
    # validate-theory grid
    theory_bs: tuple = (3, 4, 5, 6)
    theory_width: int = 1000
    theory_trials: int = 50
    theory_chunk: int = 500
    failure_bs: tuple = (2,)
    failure_ms: tuple = (10, 20, 30, 40)
    failure_trials: int = 500
    failure_p_fr: float = 1e-9
    # analyze
    analyze_bs: tuple = (2, 4, 8, 10, 16, 20, 25)
    analyze_ms: tuple = (50, 100, 200, 400, 1000, 2000)

    def __post_init__(self):
        self.validate()

    @property
    def dp_enabled(self) -> bool:
        return self.clip_norm is not None or self.noise_sigma > 0 or self.noise_rel > 0

    @property
    def fedavg_enabled(self) -> bool:
        return self.fedavg_epochs > 0

    @property
    def noisy(self) -> bool:
        return self.noise_sigma > 0 or self.noise_rel > 0

    def validate(self) -> None:
        for name in ("input_dim", "width", "depth", "num_classes", "batch_size", "trials",
                     "max_samples", "chunk_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.data_source not in DATA_SOURCES:
            raise ConfigError(f"data_source must be one of {DATA_SOURCES}")
        if self.data_source != "synthetic-gaussian" and not self.data_path:
            raise ConfigError(f"data_source={self.data_source} needs data_path")
        if not 1 <= self.layer <= self.depth:
            raise ConfigError(f"layer must lie in [1, {self.depth}]")
        if self.layer == self.depth:
            raise ConfigError("the last layer has no succeeding ReLU; attack an earlier layer")
        if self.fedavg_enabled and self.dp_enabled:
            raise ConfigError("FedAvg and DPSGD settings are mutually exclusive")
        if self.fedavg_mini_batch is not None and not 1 <= self.fedavg_mini_batch <= self.batch_size:
            raise ConfigError("fedavg_mini_batch must lie in [1, batch_size]")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.noise_sigma < 0 or self.noise_rel < 0:
            raise ConfigError("noise must be non-negative")
        if len(self.data_range) != 2 or not self.data_range[1] > self.data_range[0]:
            raise ConfigError("data_range must be [lo, hi] with hi > lo")

    def check_paths(self) -> None:
        if self.data_path and not Path(self.data_path).exists():
            raise FileNotFoundError(f"data file not found: {self.data_path}")

    def sampler_config(self, seed: int, noise_sigma: float = 0.0) -> SamplerConfig:
        angle = self.angle_tol
        if angle is None:
            angle = 1e-4 if self.robust_mode else 1e-6
        return SamplerConfig(
            max_samples=self.max_samples,
            chunk_size=self.chunk_size,
            tau=self.tau,
            target_false_reject=self.p_fr,
            zero_rel_tol=self.zero_rel_tol,
            robust_mode=self.robust_mode,
            noise_sigma=noise_sigma,
            noise_mult=self.noise_mult,
            angle_tol=angle,
            seed=seed,
        )

    def effective_accept_lambda(self) -> float:
        if self.accept_lambda is not None:
            return self.accept_lambda
        return 0.98 if (self.robust_mode or self.noisy) else 1.0 - 1e-12

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, hint: Any, raw: Any):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union and type(None) in args:
        if text.lower() in {"", "none", "null"}:
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple:
            parts = [p for p in text.strip("[]()").replace(",", " ").split() if p]
            return tuple(int(p) if p.lstrip("-").isdigit() else float(p) for p in parts)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_pairs(pairs: dict) -> dict:
    hints = typing.get_type_hints(ExperimentConfig)
    out = {}
    for key, raw in pairs.items():
        name = key.strip().replace("-", "_")
        if name not in hints:
            raise ConfigError(f"unknown config key: {key}")
        out[name] = _coerce(name, hints[name], raw)
    return out


def read_config_file(path: str | os.PathLike) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string("[spear]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return dict(parser["spear"])


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None, **defaults) -> ExperimentConfig:
    values = dict(defaults)
    if path:
        values.update(parse_pairs(read_config_file(path)))
    if overrides:
        values.update(parse_pairs({k: v for k, v in overrides.items() if v is not None}))
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return dataclasses.replace(cfg, **changes)
