"""
Full fine-tuning objective ``L = L_sup + lam * sum_layers omega``.

The ``cl`` toggle trains through entrywise dropout masks on the pretrained
weights, the ``tr`` toggle adds the subspace penalty, and ``pt`` only acts
after training (spectral rescaling) so it has no effect here. LoRA dropout
on the adapter input is independent of the toggles and applies to plain
LoRA as well.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

from core.rng import Rng
from models.lora import DropoutMask, Gradients, ModelStack, backward
from models.method_presets import parse_toggles
from objectives.orthogonality import PretrainedSubspace
from utils.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lam: float = 0.0
    p: float = 0.0
    k: int = 32
    cl: bool = False
    tr: bool = False
    pt: bool = False
    lora_dropout: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.p}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigError(f"LoRA dropout rate must lie in [0, 1), got {self.lora_dropout}")
        if self.k < 1:
            raise ConfigError(f"subspace rank must be positive, got {self.k}")

    @classmethod
    def from_toggles(cls, toggles, lam: float = 0.0, p: float = 0.0, k: int = 32, lora_dropout: float = 0.0) -> "LossConfig":
        flags = parse_toggles(toggles)
        return cls(lam=lam, p=p, k=k, cl=flags["cl"], tr=flags["tr"], pt=flags["pt"], lora_dropout=lora_dropout)

    @property
    def effective_lam(self) -> float:
        return self.lam if self.tr else 0.0


def layer_subspaces(stack: ModelStack, k: int) -> Dict[str, PretrainedSubspace]:
    """Top-k pretrained subspaces of every layer with an active adapter, capped per side by the adapter rank."""
    return {
        layer.name: PretrainedSubspace.for_adapter(layer.w_pre, k, layer.r)
        for layer in stack.layers
        if layer.active
    }


def sample_masks(stack: ModelStack, p: float, rng: Rng):
    return [DropoutMask.sample(layer.w_pre.shape, p, rng) for layer in stack.layers]


def sample_adapter_masks(stack: ModelStack, n: int, p: float, rng: Rng):
    """Input masks (n x in) for every active adapter, None for the other layers."""
    return [
        DropoutMask.sample((n, layer.in_dim), p, rng) if layer.active else None
        for layer in stack.layers
    ]


def total_loss(
    stack: ModelStack,
    inputs,
    labels,
    cfg: LossConfig,
    s=None,
    rng: Optional[Rng] = None,
    subspaces: Optional[Dict[str, PretrainedSubspace]] = None,
) -> Tuple[float, Gradients]:
    """
    Loss and gradients of one optimization step.

    Args:
        stack: Model in lora (or fft) mode
        inputs: Batch rows
        labels: Batch labels
        cfg: Loss configuration
        s: Adapter scales (default alpha / r per layer)
        rng: Stream for the dropout masks, required when ``cl`` or LoRA dropout is on
        subspaces: Precomputed pretrained subspaces; computed here when missing

    Returns:
        (loss, Gradients)
    """
    masks = None
    if cfg.cl:
        if rng is None:
            raise ConfigError("Weight dropout needs a random stream")
        masks = sample_masks(stack, cfg.p, rng)
    adapter_masks = None
    if cfg.lora_dropout and stack.mode == "lora":
        if rng is None:
            raise ConfigError("LoRA dropout needs a random stream")
        adapter_masks = sample_adapter_masks(stack, len(inputs), cfg.lora_dropout, rng)
    lam = cfg.effective_lam
    if lam and subspaces is None:
        subspaces = layer_subspaces(stack, cfg.k)
    if s is None:
        s = stack.layer_scales(training=True)
    return backward(
        stack, inputs, labels, s=s, masks=masks, lam=lam,
        subspaces=subspaces if lam else None, adapter_masks=adapter_masks,
    )


class RoraObjective:
    """
    Objective bound to one fine-tuning run.

    Pretrained subspaces are computed once from the frozen weights when the
    objective is created.
    """

    def __init__(self, stack: ModelStack, cfg: LossConfig):
        self.cfg = cfg
        self.subspaces: Dict[str, PretrainedSubspace] = {}
        if cfg.effective_lam:
            self.subspaces = layer_subspaces(stack, cfg.k)
            logger.info(f"Cached pretrained subspaces for {sorted(self.subspaces)} (k={cfg.k})")

    def __call__(self, stack: ModelStack, inputs, labels, s=None, rng: Optional[Rng] = None):
        return total_loss(stack, inputs, labels, self.cfg, s=s, rng=rng, subspaces=self.subspaces or None)
