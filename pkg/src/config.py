"""Layered configuration: built-in defaults < config file < flags."""
from __future__ import annotations

import copy
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml
from dotenv import load_dotenv

from .errors import ConfigError
from .geometry import GroundGrid, resolve_grid
from .heatmap import CandidateMode, GaussianKernel, KernelNorm, OutOfBoundsPolicy, gaussian_kernel

ROOT = Path(__file__).parents[1]
DEFAULTS_PATH = ROOT / "config" / "config.yaml"

# Load .env
if (ROOT / ".env").exists():
    load_dotenv(ROOT / ".env")

ENV_DATA_ROOT = "MVLABEL_DATA_ROOT"
ENV_LOG_LEVEL = "MVLABEL_LOG_LEVEL"


@dataclass
class GlobalConfig:
    grid: Any = "wildtrack"
    cell_size: float = 0.1
    kernel_size: int = 41
    sigma: float = 5.0
    kernel_norm: str = KernelNorm.PEAK_ONE.value
    min_prob: float = 0.4
    nms_radius: float = 0.5
    candidates: str = CandidateMode.LOCAL_MAXIMA.value
    match_radius: float = 0.5
    out_of_bounds: str = OutOfBoundsPolicy.REJECT.value
    data_root: Optional[str] = None
    log_level: str = "INFO"
    workers: int = 4
    seed: int = 0
    trainer_passthrough: dict = field(default_factory=dict)

    def validate(self) -> "GlobalConfig":
        try:
            KernelNorm(self.kernel_norm)
            CandidateMode(self.candidates)
            OutOfBoundsPolicy(self.out_of_bounds)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if not 0.0 < self.min_prob <= 1.0:
            raise ConfigError(f"min_prob must be in (0, 1], got {self.min_prob}")
        for name in ("nms_radius", "match_radius", "cell_size", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")
        if logging.getLevelName(str(self.log_level).upper()) not in range(0, 60):
            raise ConfigError(f"unknown log level '{self.log_level}'")
        return self

    # derived objects

    def ground_grid(self) -> GroundGrid:
        return resolve_grid(self.grid, self.cell_size)

    def kernel(self) -> GaussianKernel:
        return gaussian_kernel(int(self.kernel_size), float(self.sigma), KernelNorm(self.kernel_norm))

    @property
    def candidate_mode(self) -> CandidateMode:
        return CandidateMode(self.candidates)

    @property
    def policy(self) -> OutOfBoundsPolicy:
        return OutOfBoundsPolicy(self.out_of_bounds)

    def options(self) -> dict:
        """Extraction options handed to detector adapters."""
        return {
            "min_prob": self.min_prob,
            "nms_radius": self.nms_radius,
            "candidates": self.candidates,
        }


_FIELD_NAMES = {f.name for f in fields(GlobalConfig)}


def _apply(cfg: GlobalConfig, values: dict, source: str):
    for key, value in values.items():
        if key not in _FIELD_NAMES:
            raise ConfigError(f"{source}: unknown setting '{key}'")
        if value is None and key != "data_root":
            continue
        current = getattr(cfg, key)
        try:
            if isinstance(current, bool) or key in ("grid", "trainer_passthrough", "data_root"):
                pass
            elif isinstance(current, int):
                value = int(value)
            elif isinstance(current, float):
                value = float(value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{source}: bad value for '{key}': {value!r}") from e
        setattr(cfg, key, copy.deepcopy(value))


def read_config_file(path: Path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return doc


def load_config(config_path: Optional[Path] = None, overrides: Optional[dict] = None,
                section: Optional[str] = None,
                defaults_path: Path = DEFAULTS_PATH) -> GlobalConfig:
    """Resolve settings from the built-in file, an optional user file and flags.

    With `section`, only that block of the user file holds settings (campaign
    files keep their other keys beside a `settings:` block).
    """
    cfg = GlobalConfig()
    if defaults_path.exists():
        _apply(cfg, read_config_file(defaults_path), str(defaults_path))

    if config_path is not None:
        doc = read_config_file(config_path)
        settings = doc.get(section) if section else doc
        if settings is not None and not isinstance(settings, dict):
            raise ConfigError(f"{config_path}: '{section}' must be a mapping")
        _apply(cfg, settings or {}, str(config_path))

    if os.environ.get(ENV_DATA_ROOT):
        cfg.data_root = os.environ[ENV_DATA_ROOT]
    if os.environ.get(ENV_LOG_LEVEL):
        cfg.log_level = os.environ[ENV_LOG_LEVEL]

    if overrides:
        _apply(cfg, {k: v for k, v in overrides.items() if v is not None}, "command line")
    return cfg.validate()
