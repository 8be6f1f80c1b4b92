"""
Experiment configuration: one JSON document with a section per pipeline stage.
"""

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

from lib.errors import ConfigError
from lib.metrics import EvalConfig
from lib.model import ModelConfig
from lib.scm import ScmConfig
from lib.trainer import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = {"scm": ScmConfig, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class ExperimentConfig:
    """
    Full experiment settings.

    Defaults reproduce the desk-scale benchmark: K=6 robotic-arm world,
    50k training and 25k test frames, 2K latents, Adam at 4e-4 with batch 256
    for 100 epochs, interaction temperature 1 -> 5.
    """

    scm: ScmConfig = field(default_factory=ScmConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 42

    def validate(self) -> None:
        self.scm.validate("scm")
        self.model.validate(self.scm.num_vars, "model")
        self.train.validate("train")
        self.eval.validate("eval")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed", "must be a non-negative integer")

    @property
    def num_latents(self) -> int:
        return self.model.latents_for(self.scm.num_vars)

    def to_dict(self) -> dict:
        data = {name: getattr(self, name).to_dict() for name in SECTIONS}
        data["seed"] = self.seed
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        """
        Build and validate a configuration; missing keys keep their defaults.

        Raises:
            ConfigError: On unknown keys, wrong types or invalid values
        """
        if not isinstance(data, dict):
            raise ConfigError("<root>", "configuration must be a JSON object")
        unknown = set(data) - set(SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration key")
        sections = {}
        for name, section_cls in SECTIONS.items():
            values = data.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(name, "section must be a JSON object")
            known = {f.name: f for f in fields(section_cls)}
            for key, value in values.items():
                if key not in known:
                    raise ConfigError(f"{name}.{key}", "unknown configuration key")
                _check_type(f"{name}.{key}", getattr(section_cls(), key), value)
            sections[name] = section_cls(**values)
        config = cls(**sections, seed=data.get("seed", 42))
        config.validate()
        return config


def _check_type(path: str, default, value) -> None:
    if value is None:
        if default is not None:
            raise ConfigError(path, "must not be null")
        return
    if isinstance(default, bool) or isinstance(value, bool):
        if not (isinstance(default, bool) and isinstance(value, bool)):
            raise ConfigError(path, f"expected {type(default).__name__}, got {type(value).__name__}")
        return
    if isinstance(default, int) and not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if isinstance(default, float) and not isinstance(value, int | float):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(path, f"expected a string, got {value!r}")


def load_config(path: Path | None) -> ExperimentConfig:
    """Read a configuration file; None gives the validated defaults."""
    if path is None:
        config = ExperimentConfig()
        config.validate()
        return config
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigError("<file>", f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON in {path}: {e}") from e
    logger.debug(f"Loaded configuration from {path}")
    return ExperimentConfig.from_dict(data)
