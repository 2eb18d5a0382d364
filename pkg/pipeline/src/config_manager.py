"""
Configuration manager for the pipeline command line
"""

import json
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ValidationError
from schemas.configs import PipelineConfig
from utils.errors import ConfigError


class ConfigurationState(Enum):
    """
    Configuration states.
    """

    DEFAULT_CONFIGURATION = 0
    FILE_CONFIGURATION = 1


def _merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _validation_message(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in item['loc']) or '<root>'}: {item['msg']}"
        for item in error.errors()
    )


class ConfigurationManager:
    """
    Loads the pipeline configuration: built-in defaults, overlaid by an optional JSON
    file, overlaid by command line flags.
    """

    default_values = PipelineConfig().model_dump(mode="json")

    def __init__(self, config_file: Optional[str] = None):
        """
        Initialize the configuration manager.

        Args:
            config_file (Optional[str]): Path to a JSON configuration file.

        Raises:
            ConfigError: If the file is missing, is not JSON or fails validation.
        """
        self.config_file = config_file
        self.configuration_state = ConfigurationState.DEFAULT_CONFIGURATION
        self._values = dict(self.default_values)
        self.config = self.load_configuration()

    def load_configuration(self) -> PipelineConfig:
        if self.config_file is not None:
            path = Path(self.config_file)
            try:
                with open(path, "r", encoding="utf-8") as config_file:
                    loaded = json.load(config_file)
            except FileNotFoundError as e:
                raise ConfigError(f"configuration file {path} does not exist") from e
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read configuration file {path}: {e}") from e
            if not isinstance(loaded, dict):
                raise ConfigError(f"configuration file {path} must hold a JSON object")
            self._values = _merge(self._values, loaded)
            self.configuration_state = ConfigurationState.FILE_CONFIGURATION
        return self._validate(self._values)

    @staticmethod
    def _validate(values: dict[str, Any]) -> PipelineConfig:
        try:
            return PipelineConfig.model_validate(values)
        except ValidationError as e:
            raise ConfigError(f"invalid configuration: {_validation_message(e)}") from e

    def override(self, section: Optional[str] = None, **values: Any) -> PipelineConfig:
        """
        Applies flag values to the configuration; None means "not given".

        Args:
            section (Optional[str]): Config section the values belong to, or None for
                top level keys.

        Raises:
            ConfigError: If the result fails validation.
        """
        given = {key: value for key, value in values.items() if value is not None}
        if not given:
            return self.config
        update = {section: given} if section else given
        self._values = _merge(self._values, update)
        self.config = self._validate(self._values)
        return self.config

    def config_hash(self) -> str:
        return self.config.config_hash()


def stage_config(model: BaseModel, **values: Any):
    """
    Copy of a stage config with the given values replaced, validated again.

    Raises:
        ConfigError: If the result fails validation.
    """
    given = {key: value for key, value in values.items() if value is not None}
    try:
        return type(model).model_validate({**model.model_dump(), **given})
    except ValidationError as e:
        raise ConfigError(f"invalid {type(model).__name__}: {_validation_message(e)}") from e
