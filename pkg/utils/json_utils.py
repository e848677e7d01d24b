import json
import logging
import math
import os
from typing import Any, Dict

import numpy as np

from utils.errors import ConfigError

logger = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """
    Convert numpy scalars/arrays and tuples to plain JSON types.

    Non-finite floats become None so the output stays strict JSON.
    """
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps_canonical(data: Any) -> str:
    """Deterministic JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(to_jsonable(data), sort_keys=True, indent=2, allow_nan=False) + "\n"


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """
    Parse a configuration document.

    Raises:
        ConfigError: With line and column of the first syntax error
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: expected a JSON object at top level")
    return data


def load_json_file(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise ConfigError(f"Configuration file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    logger.debug(f"Loaded {len(text)} bytes from {path}")
    return parse_config_text(text, source=path)


def write_json_file(path: str, data: Any) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps_canonical(data))
    return path
