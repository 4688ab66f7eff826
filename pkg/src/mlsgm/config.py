"""Run configuration: JSON file, flag overrides, validation.

Precedence for every field: command-line flag > config file > default.
The seed additionally falls back to the MLSGM_SEED environment variable
(flag > file > env > 0).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

MODES = ("train", "eval", "partial", "fewshot", "gradcheck", "synth")


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass
class RunConfig:
    mode: str = "train"
    train_manifest: str | None = None
    eval_manifest: str | None = None
    checkpoint: str | None = None
    out_dir: str = "out"
    seed: int | None = None

    # instance extraction / graphs / matching network
    gamma: float = 0.5
    k_nn: int = 3
    widths: list[int] = field(default_factory=lambda: [16, 8])
    k_blocks: int | None = None
    score_pool: str = "mean"
    embed_dim: int = 8  # used only when embeddings are synthesized

    # optimizer
    lr: float = 0.01
    epochs: int = 200
    batch_size: int = 16  # gradient-accumulation window (per-image graphs)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_every: int = 30
    lr_decay_factor: float = 0.1

    # objectives
    beta: float = 0.0
    alpha: float = -4.45
    theta: float = 5.45
    mu: float = 1.0
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    margin: float = 0.05
    lambda_aux: float = 1.0

    # partial-label regime
    known_fraction: float | None = None

    # few-shot regime
    base_classes: list[int] | None = None
    novel_classes: list[int] | None = None
    k_shot: int = 5
    stage2_epochs: int | None = None
    stage2_lr: float | None = None

    # gradient check
    fd_step: float = 1e-4

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get("MLSGM_SEED")
        if env is not None:
            try:
                return int(env)
            except ValueError as e:
                raise ConfigError(f"MLSGM_SEED is not an integer: {env!r}") from e
        return 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0,1], got {self.gamma}")
        if self.k_nn < 1:
            raise ConfigError("k_nn must be positive")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError(f"widths must be positive, got {self.widths}")
        if self.k_blocks is not None and self.k_blocks != len(self.widths):
            raise ConfigError(f"k_blocks={self.k_blocks} disagrees with widths {self.widths}")
        if self.score_pool not in ("mean", "max"):
            raise ConfigError(f"score_pool must be 'mean' or 'max', got {self.score_pool!r}")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("need lr > 0, epochs >= 0, batch_size >= 1")
        if not 0.0 <= self.margin < 1.0:
            raise ConfigError(f"margin must lie in [0,1), got {self.margin}")
        if not self.gamma_neg >= self.gamma_pos >= 0.0:
            raise ConfigError("need gamma_neg >= gamma_pos >= 0")
        if self.mode in ("train", "partial", "fewshot") and not self.train_manifest:
            raise ConfigError(f"mode {self.mode!r} needs train_manifest")
        if self.mode == "partial":
            if self.known_fraction is None:
                raise ConfigError("partial mode needs known_fraction")
            if not 0.0 < self.known_fraction <= 1.0:
                raise ConfigError(f"known_fraction must lie in (0,1], got {self.known_fraction}")
        if self.mode == "fewshot":
            if not self.base_classes or not self.novel_classes:
                raise ConfigError("fewshot mode needs base_classes and novel_classes")
            if self.k_shot < 1:
                raise ConfigError("k_shot must be positive")
        if self.mode == "eval" and not (self.checkpoint and self.eval_manifest):
            raise ConfigError("eval mode needs checkpoint and eval_manifest")
        if self.fd_step <= 0:
            raise ConfigError("fd_step must be positive")


_FIELDS = {f.name for f in fields(RunConfig)}


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = set(raw) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**raw)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Overlay non-None override values (flags win over the file)."""
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config field {key!r}")
        setattr(cfg, key, value)
    return cfg
