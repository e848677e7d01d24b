import logging
import re
from typing import Any, Dict, List

from models.method_presets import parse_toggles
from schemas.experiment_schema import EXPERIMENT_SCHEMA, default_config
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

# Kept for callers that catch validation failures by this name
ValidationError = ConfigError

LAYER_NAMES = {"linear": ["out"], "mlp": ["hidden", "out"]}

_TOP_PATTERN = re.compile(r"^top[1-9]\d*$")

_PYTHON_TYPES = {
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "string": lambda v: isinstance(v, str),
    "boolean": lambda v: isinstance(v, bool),
    "array": lambda v: isinstance(v, list),
}


def _check_value(key: str, value: Any, prop: Dict[str, Any]) -> None:
    """Check one value against its schema entry."""
    types = prop["type"] if isinstance(prop["type"], list) else [prop["type"]]
    if not any(_PYTHON_TYPES[t](value) for t in types):
        raise ConfigError(f"'{key}' must be of type {' or '.join(types)}, got {value!r}")
    if "enum" in prop and value not in prop["enum"]:
        raise ConfigError(f"'{key}' must be one of {prop['enum']}, got {value!r}")
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        if "minimum" in prop and value < prop["minimum"]:
            raise ConfigError(f"'{key}' must be >= {prop['minimum']}, got {value}")
        if "maximum" in prop and value > prop["maximum"]:
            raise ConfigError(f"'{key}' must be <= {prop['maximum']}, got {value}")
        if "exclusiveMinimum" in prop and value <= prop["exclusiveMinimum"]:
            raise ConfigError(f"'{key}' must be > {prop['exclusiveMinimum']}, got {value}")
        if "exclusiveMaximum" in prop and value >= prop["exclusiveMaximum"]:
            raise ConfigError(f"'{key}' must be < {prop['exclusiveMaximum']}, got {value}")
    if isinstance(value, list):
        if len(value) < prop.get("minItems", 0):
            raise ConfigError(f"'{key}' needs at least {prop['minItems']} entries")
        if "items" in prop:
            for i, item in enumerate(value):
                _check_value(f"{key}[{i}]", item, prop["items"])


def _check_layer_selector(key: str, value: Any, names: List[str], allow_top: bool) -> None:
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered in ("all", "none") or (allow_top and _TOP_PATTERN.match(lowered)):
            return
        value = [part.strip() for part in value.split(",")]
    unknown = [name for name in value if name not in names]
    if unknown:
        raise ConfigError(f"'{key}' names unknown layers {unknown}; the model has {names}")


def _class_count(n: int, num_classes: int, label: int) -> int:
    """Rows labelled ``label`` among ``n`` round-robin labels."""
    return len(range(label, n, num_classes))


def _check_sweep_values(axis: str, values: List[float]) -> None:
    for v in values:
        if axis == "r" and (v != int(v) or v < 1):
            raise ConfigError(f"Rank sweep values must be positive integers, got {v}")
        if axis == "p" and not 0.0 <= v < 1.0:
            raise ConfigError(f"Dropout sweep values must lie in [0, 1), got {v}")
        if axis == "alpha" and v <= 0:
            raise ConfigError(f"Alpha sweep values must be positive, got {v}")
        if axis in ("s", "lambda") and v < 0:
            raise ConfigError(f"{axis} sweep values must be non-negative, got {v}")


def validate_experiment_config(raw: Dict[str, Any]) -> Dict[str, Any]:
    """
    Validate a configuration object and fill in every default.

    Args:
        raw: Parsed configuration (possibly partial)

    Returns:
        The resolved configuration

    Raises:
        ConfigError: On unknown keys, wrong types, out-of-range values or
            setups in which the backdoor or its metrics are undefined
    """
    if not isinstance(raw, dict):
        raise ConfigError(f"Configuration must be a JSON object, got {type(raw).__name__}")
    properties = EXPERIMENT_SCHEMA["properties"]
    unknown = sorted(set(raw) - set(properties))
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {unknown}")

    cfg = default_config()
    cfg.update(raw)
    for key, value in cfg.items():
        _check_value(key, value, properties[key])

    c = cfg["num_classes"]
    if cfg["y_bd"] >= c:
        raise ConfigError(f"y_bd={cfg['y_bd']} is not a class index for num_classes={c}")
    if cfg["d"] <= c:
        raise ConfigError(f"d={cfg['d']} must exceed num_classes={c} to fit a trigger orthogonal to the class means")
    if cfg["pretrain_min_epochs"] > cfg["pretrain_max_epochs"]:
        raise ConfigError("pretrain_min_epochs exceeds pretrain_max_epochs")

    target_rows = _class_count(cfg["n_proxy"], c, cfg["y_bd"])
    available = target_rows if cfg["clean_label"] else cfg["n_proxy"] - target_rows
    if cfg["n_poison"] > available:
        kind = "clean-label" if cfg["clean_label"] else "dirty-label"
        raise ConfigError(f"{kind} poisoning of {cfg['n_poison']} rows needs more proxy rows ({available} candidates)")
    for key in ("n_test", "n_proxy_heldout"):
        if cfg[key] - _class_count(cfg[key], c, cfg["y_bd"]) == 0:
            raise ConfigError(f"'{key}' leaves no rows outside the target class, ASR undefined")

    parse_toggles(cfg["toggles"])
    for cell in cfg["ablation_cells"]:
        parse_toggles(cell)

    names = LAYER_NAMES[cfg["architecture"]]
    _check_layer_selector("adapter_layers", cfg["adapter_layers"], names, allow_top=False)
    _check_layer_selector("rescale_layers", cfg["rescale_layers"], names, allow_top=True)
    _check_sweep_values(cfg["axis"], cfg["values"])

    seeds = cfg["seeds"]
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"Duplicate seeds in {seeds}")
    logger.debug(f"Resolved configuration with {len(cfg)} keys")
    return cfg


def resolve_adapter_layers(cfg: Dict[str, Any]):
    """Layer names with an active adapter, or None for all layers."""
    value = cfg["adapter_layers"]
    if isinstance(value, str):
        lowered = value.strip().lower()
        if lowered == "all":
            return None
        if lowered == "none":
            return []
        return [part.strip() for part in value.split(",")]
    return list(value)
