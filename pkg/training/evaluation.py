import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from data.synth import Dataset, TriggerSpec, triggered_eval_set
from models.lora import ModelStack, Scales, predict

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Metrics:
    """Clean accuracy and attack success rate; ``delta`` is derived."""

    ca: float
    asr: float

    @property
    def delta(self) -> float:
        return self.ca - self.asr

    def as_dict(self):
        return {"ca": self.ca, "asr": self.asr, "delta": self.delta}


def attack_success_rate(stack: ModelStack, triggered: Dataset, y_bd: int, s: Scales = None) -> float:
    predictions = predict(stack, triggered.inputs, s)
    return float(np.mean(predictions == y_bd))


def evaluate(stack: ModelStack, s_inference: Scales, clean_test: Dataset, trig: TriggerSpec) -> Metrics:
    """
    CA on ``clean_test`` and ASR on its triggered rows outside class ``y_bd``.

    Args:
        stack: Model to evaluate (no dropout)
        s_inference: Adapter scale(s); None uses each layer's inference scale
        clean_test: Untriggered test set
        trig: Trigger and backdoor target

    Raises:
        DegenerateInputError: If no test row is eligible for the ASR
    """
    triggered = triggered_eval_set(clean_test, trig)
    ca = float(np.mean(predict(stack, clean_test.inputs, s_inference) == clean_test.labels))
    asr = attack_success_rate(stack, triggered, trig.y_bd, s_inference)
    return Metrics(ca=ca, asr=asr)


def evaluate_frozen_baseline(poisoned: ModelStack, clean_test: Dataset, trig: TriggerSpec) -> Metrics:
    """Metrics of the poisoned backbone with no fine-tuning at all."""
    metrics = evaluate(poisoned, 0.0, clean_test, trig)
    logger.info(f"No-finetune baseline: CA={metrics.ca:.4f} ASR={metrics.asr:.4f}")
    return metrics


def scale_sweep(
    stack: ModelStack, values: Sequence[float], clean_test: Dataset, trig: TriggerSpec
) -> List[Tuple[float, Metrics]]:
    """Metrics with every adapter evaluated at each scale in ``values``."""
    results = []
    for s in values:
        metrics = evaluate(stack, float(s), clean_test, trig)
        logger.debug(f"s={s}: CA={metrics.ca:.4f} ASR={metrics.asr:.4f}")
        results.append((float(s), metrics))
    return results
