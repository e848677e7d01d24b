"""
Per-layer spectral strength and alignment of adapter updates.

For each layer the report holds the pretrained spectral norm, the spectral
norm of the scaled update ``s * B A`` at the layer's inference scale, their
ratio, and the largest |cosine| between the update's leading left singular
vector and the top-k left singular vectors of the pretrained weight.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

from core.linalg import leading_left_vector, max_abs_cosine, sigma_max, top_singular_vectors
from models.lora import ModelStack
from objectives.orthogonality import PretrainedSubspace, projected_update_norms
from utils.errors import DegenerateInputError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SpectralRecord:
    layer: str
    sigma_pre: float
    sigma_delta: float
    ratio: float
    max_cosine: float
    untrained: bool = False

    def as_row(self) -> Dict[str, object]:
        row = asdict(self)
        row.pop("untrained")
        return row


@dataclass(frozen=True)
class SpectralReport:
    records: List[SpectralRecord]

    def record(self, layer: str) -> SpectralRecord:
        for rec in self.records:
            if rec.layer == layer:
                return rec
        raise KeyError(layer)

    @property
    def untrained_layers(self) -> List[str]:
        return [rec.layer for rec in self.records if rec.untrained]


def spectral_report(stack: ModelStack, k: int = 32, s: Optional[float] = None) -> SpectralReport:
    """
    Spectral diagnostics of every adapter-carrying layer.

    Args:
        stack: Model with adapters
        k: Number of pretrained left singular vectors to compare against
        s: Scale applied to ``B A``; defaults to each layer's inference scale

    Returns:
        SpectralReport; layers with a zero update are flagged, not fatal
    """
    adapted = [layer for layer in stack.layers if layer.has_adapter]
    if not adapted:
        raise DegenerateInputError("spectral report needs adapters")

    records = []
    for layer in adapted:
        scale = layer.inference_scale if s is None else s
        delta = scale * layer.delta()
        sigma_pre = sigma_max(layer.w_pre)
        sigma_delta = sigma_max(delta)
        lead = leading_left_vector(delta) if sigma_delta > 0.0 else None
        if lead is None:
            logger.warning(f"Layer {layer.name} has an untrained adapter")
            records.append(SpectralRecord(layer.name, sigma_pre, 0.0, math.inf, 0.0, untrained=True))
            continue
        kk = min(k, layer.out_dim, layer.in_dim)
        u_k, _ = top_singular_vectors(layer.w_pre, kk)
        records.append(
            SpectralRecord(
                layer=layer.name,
                sigma_pre=sigma_pre,
                sigma_delta=sigma_delta,
                ratio=sigma_pre / sigma_delta,
                max_cosine=max_abs_cosine(lead, u_k),
            )
        )
        logger.debug(f"{layer.name}: sigma_pre={sigma_pre:.4g} sigma_delta={sigma_delta:.4g}")
    return SpectralReport(records)


def subspace_overlap(stack: ModelStack, k: int = 32) -> Dict[str, Dict[str, float]]:
    """Norms of the unscaled update projected on each layer's top-k pretrained subspaces."""
    overlap = {}
    for layer in stack.layers:
        if not layer.has_adapter:
            continue
        sub = PretrainedSubspace.from_weight(layer.w_pre, k)
        left, right = projected_update_norms(layer.delta(), sub)
        overlap[layer.name] = {"left": left, "right": right}
    return overlap
