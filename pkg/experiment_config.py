"""
Experiment Config Module
Loads and validates the sectioned JSON configuration for runs and verification
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from adaptation_engine import FinetuneConfig
from errors import ConfigInvalid, InvalidWorldConfig
from synthetic_world import WorldConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "RAGADAPT_THREADS"

MODES = ("T2I", "I2I", "ORACLE")
HEADS = ("ZOC", "RET", "EN", "EN_F", "MIX", "EN_TUNED")
DEFAULT_RATIOS = (0.1, 0.5, 1.0, 2.0, 5.0, 7.5, 10.0, 15.0, 20.0, 50.0)


@dataclass(frozen=True)
class LoggingConfig:
    log_level: str = "INFO"
    log_dir: str = "logs"
    max_log_bytes: int = 10 * 1024 * 1024
    backup_count: int = 5
    language: str = "en"


@dataclass(frozen=True)
class TheoryConfig:
    worlds: int = 4
    kappas: Tuple[float, ...] = (0.05, 0.1)
    nus: Tuple[float, ...] = (0.6, 1.0)
    rho_cs: Tuple[float, ...] = (0.0, 0.05)
    shots: Tuple[int, ...] = (1, 4, 16)
    alpha: float = 0.5
    gamma: float = 0.5
    delta: float = 0.1
    trials: int = 20
    bernstein_trials: int = 200
    samples: int = 2000
    draws: int = 100_000
    lipschitz_classes: Tuple[int, ...] = (2, 10, 100)
    lipschitz_trials: int = 10_000
    adversarial_fraction: float = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    shots: Tuple[int, ...] = (1, 2, 4, 8, 16)
    seeds_per_class: Tuple[int, ...] = (1, 8)
    modes: Tuple[str, ...] = MODES
    heads: Tuple[str, ...] = HEADS
    ratios: Tuple[float, ...] = DEFAULT_RATIOS
    omegas: Tuple[float, ...] = (1.0,)
    trials: int = 5
    test_size: int = 1000
    val_size: int = 200
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    output: str = "runs/latest"
    master_seed: int = 0
    threads: int = 1
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    theory: TheoryConfig = field(default_factory=TheoryConfig)

    def i2i_labels(self) -> Tuple[Tuple[str, int], ...]:
        """(mode label, seed count); several seed counts get I2I@n labels."""
        if len(self.seeds_per_class) == 1:
            return (("I2I", self.seeds_per_class[0]),)
        return tuple((f"I2I@{n}", n) for n in self.seeds_per_class)


_TUPLE_KEYS = {"shots", "seeds_per_class", "modes", "heads", "ratios", "omegas",
               "kappas", "nus", "rho_cs", "lipschitz_classes"}


def _line_of(text: str, key: str) -> Optional[int]:
    needle = f'"{key}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


def _coerce(name: str, value: Any, default: Any, text: str):
    """Check a JSON value against the type of the field's default."""
    line = _line_of(text, name)
    if name in _TUPLE_KEYS:
        if isinstance(value, (int, float, str)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list) or not value:
            raise ConfigInvalid(f"'{name}' must be a non-empty list", line)
        kind = type(default[0])
        items = []
        for item in value:
            if kind is float and isinstance(item, int) and not isinstance(item, bool):
                item = float(item)
            if not isinstance(item, kind) or isinstance(item, bool):
                raise ConfigInvalid(f"'{name}' entries must be {kind.__name__}, got {item!r}", line)
            items.append(item)
        return tuple(items)
    if isinstance(default, Enum):
        if not isinstance(value, str):
            raise ConfigInvalid(f"'{name}' must be a string, got {value!r}", line)
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigInvalid(f"'{name}' must be true or false", line)
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, type(default)) or isinstance(value, bool) != isinstance(default, bool):
        raise ConfigInvalid(f"'{name}' must be {type(default).__name__}, got {value!r}", line)
    return value


def _section(cls, data: Dict[str, Any], section: str, text: str, skip=()):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"section '{section}' must be an object", _line_of(text, section))
    defaults = cls()
    known = {f.name for f in fields(cls)} - set(skip)
    values = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigInvalid(f"unknown key '{key}' in section '{section}'", _line_of(text, key))
        values[key] = _coerce(key, value, getattr(defaults, key), text)
    try:
        return replace(defaults, **values)
    except (ValueError, InvalidWorldConfig) as e:
        raise ConfigInvalid(f"section '{section}': {e}", _line_of(text, section))


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a configuration document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"malformed JSON: {e.msg}", e.lineno)
    if not isinstance(raw, dict):
        raise ConfigInvalid("configuration must be a JSON object", 1)

    sections = {"logging", "world", "experiment", "theory"}
    for key in raw:
        if key not in sections:
            raise ConfigInvalid(f"unknown section '{key}'", _line_of(text, key))

    log_config = _section(LoggingConfig, raw.get("logging", {}), "logging", text)
    world = _section(WorldConfig, raw.get("world", {}), "world", text)
    theory = _section(TheoryConfig, raw.get("theory", {}), "theory", text)

    experiment = dict(raw.get("experiment", {}))
    finetune = _section(FinetuneConfig, experiment.pop("finetune", {}), "finetune", text)
    config = _section(ExperimentConfig, experiment, "experiment", text,
                      skip=("world", "finetune", "logging", "theory"))
    config = replace(config, world=world, finetune=finetune, logging=log_config, theory=theory)
    validate_config(config, text)
    return config


def validate_config(config: ExperimentConfig, text: str = "") -> ExperimentConfig:
    def fail(message, key):
        raise ConfigInvalid(message, _line_of(text, key) if text else None)

    if config.trials < 1:
        fail("trials must be at least 1", "trials")
    if any(k < 1 or k > config.world.db_per_cluster for k in config.shots):
        fail(f"every shot count must lie in [1, db_per_cluster = {config.world.db_per_cluster}]", "shots")
    if any(n < 1 for n in config.seeds_per_class):
        fail("seeds_per_class entries must be positive", "seeds_per_class")
    for mode in config.modes:
        if mode not in MODES:
            fail(f"unknown mode {mode!r}; choose from {', '.join(MODES)}", "modes")
    for head in config.heads:
        if head not in HEADS:
            fail(f"unknown head {head!r}; choose from {', '.join(HEADS)}", "heads")
    if any(r <= 0 for r in config.ratios):
        fail("ratios must be positive", "ratios")
    if any(w <= 0 for w in config.omegas):
        fail("omegas must be positive", "omegas")
    if config.test_size < 1 or config.val_size < 1:
        fail("test_size and val_size must be positive", "test_size")
    if config.master_seed < 0:
        fail("master_seed must be non-negative", "master_seed")
    if config.threads < 1:
        fail("threads must be at least 1", "threads")
    if config.logging.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        fail(f"unknown log_level {config.logging.log_level!r}", "log_level")

    theory = config.theory
    if not 0.0 < theory.delta < 1.0:
        fail("delta must lie in (0, 1)", "delta")
    if min(theory.worlds, theory.trials, theory.bernstein_trials, theory.samples,
           theory.draws, theory.lipschitz_trials) < 1:
        fail("theory counts must be positive", "theory")
    if any(k < 1 for k in theory.shots):
        fail("theory shots must be positive", "shots")
    if not (0.0 <= theory.alpha <= 1.0 and 0.0 <= theory.gamma <= 1.0
            and theory.alpha + theory.gamma <= 1.0 + 1e-12):
        fail("theory alpha and gamma must lie in [0, 1] with alpha + gamma <= 1", "alpha")
    if any(not 0.0 <= k < 0.5 for k in theory.kappas):
        fail("kappas must lie in [0, 0.5)", "kappas")
    if any(not 0.0 < n <= 2.0 for n in theory.nus):
        fail("nus must lie in (0, 2]", "nus")
    if any(not 0.0 <= r < 1.0 for r in theory.rho_cs):
        fail("rho_cs must lie in [0, 1)", "rho_cs")
    if any(c < 2 for c in theory.lipschitz_classes):
        fail("lipschitz_classes entries must be at least 2", "lipschitz_classes")
    if not 0.0 < theory.adversarial_fraction <= 1.0:
        fail("adversarial_fraction must lie in (0, 1]", "adversarial_fraction")
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigInvalid(f"cannot read {path}: {e.strerror}")
    config = parse_config(text)
    logger.info(f"Configuration loaded from {path}")
    return config


def resolve_threads(cli_value: Optional[int], config_value: int) -> int:
    """--threads wins, then RAGADAPT_THREADS, then the config."""
    if cli_value is not None:
        value = cli_value
    elif os.environ.get(THREADS_ENV):
        try:
            value = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ConfigInvalid(f"{THREADS_ENV} must be an integer, got {os.environ[THREADS_ENV]!r}")
    else:
        value = config_value
    if value < 1:
        raise ConfigInvalid(f"thread count must be at least 1, got {value}")
    return value


def apply_overrides(config: ExperimentConfig, seed: Optional[int] = None, threads: Optional[int] = None,
                    out: Optional[str] = None) -> ExperimentConfig:
    changes: Dict[str, Any] = {"threads": resolve_threads(threads, config.threads)}
    if seed is not None:
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigInvalid(f"--seed must be an unsigned 64-bit integer, got {seed}")
        changes["master_seed"] = seed
        changes["world"] = replace(config.world, master_seed=seed)
    if out is not None:
        changes["output"] = out
    return replace(config, **changes)
