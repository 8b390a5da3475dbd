"""
Run configuration: one INI-style file with [run] [model] [task] [schedule]
[distill] [train] sections, parsed strictly, plus a free-form [options] section.
Unknown sections or keys and values that do not convert to the field type are
rejected with the key named.
"""

from __future__ import annotations

import configparser
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Union

from hwattn.adapt.distill import DistillConfig
from hwattn.adapt.harness import SyntheticTaskSpec, TrainConfig
from hwattn.adapt.schedule import CurriculumSchedule
from hwattn.engine.model import ModelConfig
from hwattn.run.exceptions import ConfigError

logger = logging.getLogger(__name__)

SECTION_TYPES = {
    "model": ModelConfig,
    "task": SyntheticTaskSpec,
    "schedule": CurriculumSchedule,
    "distill": DistillConfig,
    "train": TrainConfig,
}

RUN_KEYS = {"seed": int, "out_dir": str}

REQUIRED_KEYS = {
    "model": ("n_layers", "d_model", "n_q_heads", "n_kv_heads", "d_ff", "vocab_size"),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, raw: Any, kind: Any) -> Any:
    if kind in (bool, "bool"):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in _TRUE:
            return True
        if text in _FALSE:
            return False
        raise ConfigError(key, f"expected a boolean, got {raw!r}")
    try:
        if kind in (int, "int"):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        if kind in (float, "float"):
            return float(raw)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected {getattr(kind, '__name__', kind)}, got {raw!r}") from None
    return str(raw)


def _section_from_dict(section: str, values: Dict[str, Any]):
    cls = SECTION_TYPES[section]
    types = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(key, f"unknown key in [{section}]")
        kwargs[key] = _coerce(key, raw, types[key])
    for key in REQUIRED_KEYS.get(section, ()):
        if key not in kwargs:
            raise ConfigError(key, f"missing required key in [{section}]")
    try:
        obj = cls(**kwargs)
    except ValueError as e:
        raise ConfigError(section, str(e)) from None
    return obj.validate()


@dataclass
class RunConfig:
    """
    This class gathers everything a command needs. A persisted RunConfig
    (to_file) re-runs to identical results. options holds the command flags
    of the run that wrote it, as text.
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    task: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    schedule: CurriculumSchedule = field(default_factory=CurriculumSchedule)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out_dir: str = "results"
    options: Dict[str, str] = field(default_factory=dict)

    def from_file(self, filename: Union[str, Path]) -> RunConfig:
        """
        This method reads a config file and calls RunConfig.from_dict

        Args:
            filename (Union[str, Path]): path of the .cfg file

        Raises:
            FileNotFoundError: missing file
            ConfigError: unknown section/key or invalid value

        Returns:
            RunConfig: populated config
        """
        filename = Path(filename)
        if not filename.is_file():
            raise FileNotFoundError(f"config file not found: {filename}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(filename, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(str(filename), f"unreadable config: {e}") from None
        config_dict = {section: dict(parser.items(section)) for section in parser.sections()}
        logger.info(f"read config {filename}")
        return self.from_dict(config_dict)

    def from_dict(self, config_dict: Dict[str, Dict[str, Any]]) -> RunConfig:
        """
        This method populates the RunConfig from {section: {key: value}}

        Args:
            config_dict (Dict[str, Dict[str, Any]]): parsed sections

        Raises:
            ConfigError: unknown section/key or invalid value

        Returns:
            RunConfig: self
        """
        for section, values in config_dict.items():
            if section == "run":
                for key, raw in values.items():
                    if key not in RUN_KEYS:
                        raise ConfigError(key, "unknown key in [run]")
                    setattr(self, key, _coerce(key, raw, RUN_KEYS[key]))
            elif section == "options":
                self.options = {key: str(raw) for key, raw in values.items()}
            elif section in SECTION_TYPES:
                setattr(self, section, _section_from_dict(section, values))
            else:
                raise ConfigError(section, "unknown config section")
        self.validate()
        return self

    def validate(self) -> RunConfig:
        self.model.validate()
        self.task.validate()
        self.schedule.validate()
        self.distill.validate()
        self.train.validate()
        if self.model.vocab_size < self.task.vocab_size:
            raise ConfigError("vocab_size", f"model vocab {self.model.vocab_size} is smaller than task vocab {self.task.vocab_size}")
        if self.task.total_len > self.model.max_position:
            raise ConfigError("max_position", f"{self.model.max_position} is shorter than task sequences of {self.task.total_len}")
        return self

    def override(self, section: str, **values) -> RunConfig:
        """
        This method replaces fields of one section, skipping None values (unset CLI flags)

        Args:
            section (str): section name
            **values: field values

        Returns:
            RunConfig: self
        """
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            try:
                setattr(self, section, replace(getattr(self, section), **values).validate())
            except TypeError as e:
                raise ConfigError(section, str(e)) from None
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        out = {"run": {"seed": self.seed, "out_dir": self.out_dir}}
        for section in SECTION_TYPES:
            obj = getattr(self, section)
            out[section] = {f.name: getattr(obj, f.name) for f in fields(obj)}
        if self.options:
            out["options"] = dict(self.options)
        return out

    def to_file(self, filename: Union[str, Path]) -> Path:
        parser = configparser.ConfigParser(interpolation=None)
        for section, values in self.to_dict().items():
            parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in values.items()}
        filename = Path(filename)
        with open(filename, "w", encoding="utf-8") as fh:
            parser.write(fh)
        return filename
