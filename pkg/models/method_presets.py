"""
Fine-tuning method presets.
Maps each method name to the model mode it trains in and its default toggles.
"""

from typing import Any, Dict, Iterable, Optional

from utils.errors import ConfigError

# Toggles: cl = clean-strengthened weight dropout, tr = subspace penalty, pt = post-training rescale
TOGGLE_NAMES = ("cl", "tr", "pt")

METHOD_PRESETS = {
    "frozen": {
        "mode": "frozen",
        "toggles": {"cl": False, "tr": False, "pt": False},
        "notes": "No fine-tuning; evaluates the poisoned backbone as is"
    },
    "fft": {
        "mode": "fft",
        "toggles": {"cl": False, "tr": False, "pt": False},
        "notes": "Full fine-tuning overwrites the pretrained weights"
    },
    "lora": {
        "mode": "lora",
        "toggles": {"cl": False, "tr": False, "pt": False},
        "notes": "Plain LoRA, frozen backbone, scale alpha / r"
    },
    "rora": {
        "mode": "lora",
        "toggles": {"cl": True, "tr": True, "pt": True},
        "notes": "LoRA with weight dropout, subspace penalty and spectral rescaling"
    },
}


def parse_toggles(spec: Optional[Any]) -> Dict[str, bool]:
    """
    Parse toggles given as ``"cl,tr,pt"``, ``"none"``, a list of names or a dict.

    Returns:
        Dict with every toggle name set to a bool
    """
    if spec is None:
        raise ConfigError("No toggles given")
    if isinstance(spec, dict):
        unknown = set(spec) - set(TOGGLE_NAMES)
        if unknown:
            raise ConfigError(f"Unknown toggles {sorted(unknown)}")
        return {name: bool(spec.get(name, False)) for name in TOGGLE_NAMES}
    if isinstance(spec, str):
        names: Iterable[str] = [] if spec.strip().lower() in ("", "none") else spec.split(",")
    else:
        names = spec
    names = [name.strip().lower() for name in names]
    unknown = set(names) - set(TOGGLE_NAMES)
    if unknown:
        raise ConfigError(f"Unknown toggles {sorted(unknown)}, expected a subset of {TOGGLE_NAMES}")
    return {name: name in names for name in TOGGLE_NAMES}


def get_method_preset(method: str, toggles: Optional[Any] = None) -> Dict[str, Any]:
    """
    Get the preset for a fine-tuning method.

    Args:
        method: One of the METHOD_PRESETS keys
        toggles: Optional override of the default toggles (rora only)

    Returns:
        Dict with "mode" and "toggles"
    """
    if method not in METHOD_PRESETS:
        raise ConfigError(f"Unknown method '{method}', expected one of {sorted(METHOD_PRESETS)}")
    preset = METHOD_PRESETS[method]
    resolved = dict(preset["toggles"])
    if toggles is not None:
        resolved = parse_toggles(toggles)
        if method != "rora" and any(resolved.values()):
            raise ConfigError(f"Toggles only apply to rora, got {resolved} for {method}")
    return {"mode": preset["mode"], "toggles": resolved}
