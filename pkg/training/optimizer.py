"""
AdamW with decoupled weight decay.

    m_t = b1 m + (1 - b1) g
    v_t = b2 v + (1 - b2) g^2
    p  <- p - lr (m_hat / (sqrt(v_hat) + eps) + wd p)
"""

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from utils.errors import ConfigError, NumericalError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class OptimState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"Learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"Weight decay must be non-negative, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"Betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")


def adamw_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: OptimState,
    lr: float = None,
) -> Dict[str, np.ndarray]:
    """
    One AdamW update.

    Args:
        params: Current tensors by name
        grads: Gradients with the same names and shapes
        state: Moments and step counter, updated in place
        lr: Learning rate for this step (default ``state.lr``)

    Returns:
        New parameter tensors; ``params`` itself is not modified

    Raises:
        NumericalError: If a gradient has a non-finite entry
    """
    if set(params) != set(grads):
        raise ShapeError(f"Parameter names {sorted(params)} do not match gradients {sorted(grads)}")
    for name in sorted(grads):
        g = grads[name]
        if g.shape != params[name].shape:
            raise ShapeError(f"Gradient {name} has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(
                f"Non-finite gradient for {name} at step {state.step + 1}",
                details={"tensor": name, "step": state.step + 1},
            )

    lr = state.lr if lr is None else lr
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step

    updated = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        updated[name] = p - lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p)
    return updated


class AdamW:
    """AdamW holding its own state, with an optional linear warm-up of the learning rate."""

    def __init__(self, lr: float, weight_decay: float = 0.0, total_steps: int = 0, warmup_fraction: float = 0.0):
        if not 0.0 <= warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction must lie in [0, 1), got {warmup_fraction}")
        self.state = OptimState(lr=lr, weight_decay=weight_decay)
        self.warmup_steps = int(round(warmup_fraction * total_steps))

    def learning_rate_at(self, step: int) -> float:
        """Learning rate of the 1-based ``step``."""
        if self.warmup_steps and step <= self.warmup_steps:
            return self.state.lr * step / self.warmup_steps
        return self.state.lr

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        lr = self.learning_rate_at(self.state.step + 1)
        return adamw_step(params, grads, self.state, lr=lr)
