"""Flat key=value experiment configuration.

Every field has a default, so an empty file plus a mode is a complete
config.  ``print_config`` writes every field, and parsing its output gives
back an equal config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Any

from .data import ShiftConfig, WorldConfig
from .losses import KernelSpec, LossWeights
from .model import ModelConfig
from .training import AblationFlags, Schedule

MODES = (
    "gen-data",
    "train-source",
    "adapt",
    "finetune",
    "target-only",
    "eval",
    "probe",
    "ablate",
    "fraction-study",
)
DIRECTIONS = ("a->b", "b->a")
OPTIMIZERS = ("adamax", "sgd")
_WORLD = WorldConfig()


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "adapt"
    # data: an empty data_dir means the synthetic benchmark is generated in memory
    data_dir: str = ""
    checkpoint: str = ""
    out: str = "out"
    n_source: int = 20000
    n_target: int = 2000
    n_source_test: int = 2000
    n_target_test: int = 4000
    data_seed: int = 0
    direction: str = "a->b"
    target_fraction: float = 1.0
    answer_cap: int = 30
    # shift of the synthetic target domain
    visual_shift: float = 1.0
    text_shift: float = 0.7
    cov_scale: float = 2.0
    label_skew: float = 0.8
    overlap: float = 0.2747
    unanswerable_frac: float = 0.2863
    # synthetic world difficulty
    salience: float = _WORLD.salience
    region_noise: float = _WORLD.region_noise
    grid_noise: float = _WORLD.grid_noise
    keyword_prob: float = _WORLD.keyword_prob
    min_agreement: float = _WORLD.min_agreement
    shared_first: bool = _WORLD.shared_first
    # model sizes
    token_vocab: int = 64
    embed_dim: int = 32
    d_q: int = 128
    d_v: int = 64
    n_regions: int = 8
    n_grid: int = 4
    d_region: int = 64
    att_hidden: int = 64
    d_grid: int = 64
    d_e: int = 128
    cls_hidden: int = 128
    disc_hidden: int = 64
    # loss weights
    lambda_j: float = 0.025
    lambda_mm: float = 0.008
    lambda_adv: float = 0.003
    gamma_v: float = 0.8
    gamma_q: float = 1.0
    gamma_c: float = 0.001
    bandwidth: str = "median"
    sigma: float = 1.0
    # ablation flags for adapt
    mmd_modal: bool = True
    mmd_joint: bool = True
    adversarial: bool = True
    source_ce: bool = True
    # optimization
    optimizer: str = "adamax"
    batch_size: int = 128
    warmup_start: float = 0.001
    warmup_end: float = 0.01
    warmup_iters: int = 2000
    decay_factor: float = 0.15
    decay_period: int = 4000
    pretrain_iters: int = 1000
    iters: int = 1000
    seed: int = 0
    n_seeds: int = 1
    ensemble_size: int = 3
    warm_start_head: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not 0 < self.target_fraction <= 1:
            raise ConfigError(f"target_fraction must lie in (0, 1], got {self.target_fraction}")
        for name in ("iters", "pretrain_iters", "seed", "data_seed", "n_source_test", "n_target_test"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        for name in ("n_source", "n_target", "batch_size", "n_seeds", "ensemble_size", "answer_cap"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, str) and ("#" in v or "\n" in v or v != v.strip()):
                raise ConfigError(f"{f.name} may not contain '#', newlines or surrounding blanks")
        # delegate range checks to the component configs
        try:
            self.model_config(self.answer_cap, self.answer_cap)
            self.loss_weights()
            self.schedule()
            self.kernel()
            self.shift()
            self.world()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # component views ---------------------------------------------------
    def model_config(self, n_answers_source: int, n_answers_target: int) -> ModelConfig:
        return ModelConfig(
            token_vocab=self.token_vocab,
            embed_dim=self.embed_dim,
            d_q=self.d_q,
            d_v=self.d_v,
            n_regions=self.n_regions,
            n_grid=self.n_grid,
            d_region=self.d_region,
            att_hidden=self.att_hidden,
            d_grid=self.d_grid,
            d_e=self.d_e,
            cls_hidden=self.cls_hidden,
            disc_hidden=self.disc_hidden,
            n_answers_source=n_answers_source,
            n_answers_target=n_answers_target,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_j, self.lambda_mm, self.lambda_adv, self.gamma_v, self.gamma_q, self.gamma_c)

    def schedule(self) -> Schedule:
        return Schedule(self.warmup_start, self.warmup_end, self.warmup_iters, self.decay_factor, self.decay_period)

    def kernel(self) -> KernelSpec:
        return KernelSpec(self.bandwidth, self.sigma)

    def flags(self) -> AblationFlags:
        return AblationFlags(self.mmd_modal, self.mmd_joint, self.adversarial, self.source_ce)

    def shift(self) -> ShiftConfig:
        return ShiftConfig(
            self.visual_shift, self.text_shift, self.cov_scale, self.label_skew, self.overlap, self.unanswerable_frac
        )

    def world(self) -> WorldConfig:
        return WorldConfig(
            n_regions=self.n_regions,
            n_grid=self.n_grid,
            d_v=self.d_v,
            token_vocab=self.token_vocab,
            n_answers=self.answer_cap,
            region_noise=self.region_noise,
            grid_noise=self.grid_noise,
            salience=self.salience,
            keyword_prob=self.keyword_prob,
            min_agreement=self.min_agreement,
            shared_first=self.shared_first,
        )

    def with_overrides(self, **kw) -> "ExperimentConfig":
        unknown = set(kw) - FIELD_TYPES.keys()
        if unknown:
            raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
        return replace(self, **kw)


_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str}
FIELD_TYPES: dict[str, type] = {f.name: _TYPE_NAMES[f.type] for f in fields(ExperimentConfig)}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_value(key: str, text: str, line: int | None = None) -> Any:
    """Convert the text of one value to the type of field ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown key {key!r}", line)
    kind = FIELD_TYPES[key]
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            v = float(text)
            if not math.isfinite(v):
                raise ValueError(text)
            return v
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {kind.__name__} for key {key!r}", line) from None


def parse_assignments(text: str) -> dict[str, Any]:
    """Parse key=value lines ('#' starts a comment) into typed values."""
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        values[key] = parse_value(key, value, lineno)
    return values


def parse_config(text: str, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Defaults, then file values, then ``overrides`` (already typed or raw strings)."""
    values = parse_assignments(text)
    for key, value in (overrides or {}).items():
        values[key] = parse_value(key, value) if isinstance(value, str) else value
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
    return ExperimentConfig(**values)


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def print_config(config: ExperimentConfig) -> str:
    """Every field as key=value, one per line, in declaration order."""
    return "".join(f"{f.name}={format_value(getattr(config, f.name))}\n" for f in fields(config))
