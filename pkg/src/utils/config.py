"""Run configuration from flat key=value files, GREMBED_* environment variables and CLI overrides."""

import logging
import os
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Union

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from ..models.data_models import RunConfig, TrainConfig, WalkParams
from .exceptions import ConfigValidationError

logger = logging.getLogger(__name__)

ENV_PREFIX = "GREMBED_"

_SECTIONS = {
    "walk": WalkParams.model_fields,
    "train": TrainConfig.model_fields,
}


def _owner(key: str) -> str:
    """Which model a flat key belongs to; run-level keys win (`seed`)."""
    if key in RunConfig.model_fields and key not in _SECTIONS:
        return "run"
    for section, fields in _SECTIONS.items():
        if key in fields:
            return section
    raise ConfigValidationError(f"Unknown configuration key '{key}'", field_name=key)


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """`key=value` strings (from repeated --set flags) to a dict."""
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip():
            raise ConfigValidationError(f"Override '{pair}' is not of the form key=value", invalid_value=pair)
        out[key.strip()] = value.strip()
    return out


def environment_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {
        key[len(ENV_PREFIX):].lower(): value
        for key, value in environ.items()
        if key.startswith(ENV_PREFIX) and key != f"{ENV_PREFIX}LOG_LEVEL"
    }


def build_run_config(values: Mapping[str, object]) -> RunConfig:
    """Nest flat keys into RunConfig/WalkParams/TrainConfig and validate."""
    nested: Dict[str, Dict[str, object]] = {"run": {}, "walk": {}, "train": {}}
    for key, value in values.items():
        if value is None:
            continue
        nested[_owner(key)][key] = value
    data = dict(nested["run"])
    data["walk"] = nested["walk"]
    data["train"] = nested["train"]
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        field_name = ".".join(str(part) for part in first["loc"])
        raise ConfigValidationError(
            f"Invalid configuration: {field_name}: {first['msg']}",
            field_name=field_name,
            invalid_value=first.get("input"),
            original_error=e,
        ) from e


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, object]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge defaults < file < environment < overrides into a validated RunConfig."""
    if environ is None:
        load_dotenv()
    merged: Dict[str, object] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigValidationError(f"Config file {path} does not exist", field_name="config",
                                        invalid_value=str(path))
        merged.update({k: v for k, v in dotenv_values(path).items() if v is not None})
        logger.info(f"Loaded {len(merged)} setting(s) from {path}")
    merged.update(environment_overrides(environ))
    merged.update(overrides or {})
    return build_run_config(merged)


def flatten_config(cfg: RunConfig) -> Dict[str, object]:
    """The inverse of build_run_config: one flat dict of every setting."""
    data = cfg.model_dump(mode="json")
    flat = {k: v for k, v in data.items() if k not in _SECTIONS}
    for section in _SECTIONS:
        flat.update({k: v for k, v in data[section].items() if k != "seed"})
    return flat


def write_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for key, value in flatten_config(cfg).items():
            if value is None:
                continue
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, list):
                value = ",".join(str(item) for item in value)
            handle.write(f"{key}={value}\n")
