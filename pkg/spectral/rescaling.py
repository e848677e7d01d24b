"""
Post-training spectral rescaling.

The adapter of a selected layer is re-scaled at inference so that its
spectral norm matches the pretrained weight's:
``s = sigma_max(W_pre) / sigma_max(B A)``. The rescaled value replaces
alpha / r.
"""

import logging
import re
from typing import List, Sequence, Union

from core.linalg import power_iteration, sigma_max
from models.lora import LoraLayer, ModelStack
from utils.errors import ConfigError, DegenerateInputError

logger = logging.getLogger(__name__)

Selector = Union[str, Sequence[str], None]

_TOP_PATTERN = re.compile(r"^top(\d+)$")


def rescale(layer: LoraLayer) -> float:
    """
    Scale that brings the layer's update to the pretrained spectral norm.

    Raises:
        DegenerateInputError: If the update is zero
    """
    if not layer.has_adapter:
        raise DegenerateInputError(f"untrained adapter, rescale undefined (layer {layer.name} has no adapter)")
    delta = power_iteration(layer.delta())
    if delta.degenerate or delta.sigma == 0.0:
        raise DegenerateInputError(
            f"untrained adapter, rescale undefined (layer {layer.name})",
            details={"layer": layer.name},
        )
    return sigma_max(layer.w_pre) / delta.sigma


def resolve_layers(stack: ModelStack, selector: Selector) -> List[str]:
    """
    Names of the layers picked by ``selector``.

    ``none`` picks nothing, ``all`` every layer, ``topN`` the N layers
    closest to the output, and a list (or comma-separated string) picks
    layers by name.
    """
    names = stack.layer_names
    if selector is None:
        return []
    if isinstance(selector, str):
        key = selector.strip().lower()
        if key in ("", "none"):
            return []
        if key == "all":
            return list(names)
        match = _TOP_PATTERN.match(key)
        if match:
            n = int(match.group(1))
            if n < 1:
                raise ConfigError(f"Invalid layer selector '{selector}'")
            return names[-n:]
        selector = [part.strip() for part in selector.split(",")]
    unknown = [name for name in selector if name not in names]
    if unknown:
        raise ConfigError(f"Unknown layers {unknown} in selector, stack has {names}")
    return [name for name in names if name in selector]


def apply_rescale(stack: ModelStack, selector: Selector = "top3") -> ModelStack:
    """
    Copy of ``stack`` whose selected layers use their rescaled inference scale.

    Unselected layers are left as they are (alpha / r unless rescaled before).
    """
    out = stack.copy()
    selected = resolve_layers(out, selector)
    for layer in out.layers:
        if layer.name in selected:
            layer.scale = rescale(layer)
            logger.info(f"Rescaled layer {layer.name}: s_train={layer.s_train:.4g} -> s={layer.scale:.6g}")
    return out
