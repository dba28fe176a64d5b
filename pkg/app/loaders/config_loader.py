# app/loaders/config_loader.py
import configparser
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError

from app.errors import ConfigError
from app.schemas.config import RunConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

SECTIONS = ("run", "energy", "mesh", "initial", "newton", "convergence")
LIST_KEYS = {"domain", "center"}


def _value(key: str, raw: str) -> Any:
    raw = raw.strip()
    if key in LIST_KEYS:
        return [part.strip() for part in raw.split(",")]
    return raw


def parse_config(text: str, base_dir: Optional[PathLike] = None) -> Dict[str, Any]:
    """INI text to the nested dict RunConfig validates."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse config: {e}") from e

    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")

    data: Dict[str, Any] = {}
    for name in parser.sections():
        values = {key: _value(key, raw) for key, raw in parser.items(name)}
        if name == "run":
            data.update(values)
        else:
            data[name] = values

    mesh = data.get("mesh", {})
    if base_dir is not None and mesh.get("path") and not os.path.isabs(mesh["path"]):
        mesh["path"] = str(Path(base_dir) / mesh["path"])
    return data


def validate_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid config: {problems}") from e


def load_config(path: PathLike, **overrides) -> RunConfig:
    """Read and validate a run configuration; non-None overrides replace [run] keys."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)
    data.update({key: value for key, value in overrides.items() if value is not None})
    config = validate_config(data)
    logger.info("Loaded %s: scheme=%s energy=%s mesh=%s", path, config.scheme, config.energy.kind, config.mesh.kind)
    return config
