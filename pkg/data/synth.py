"""
Synthetic classification tasks with a feature-space backdoor.

Inputs are unit vectors drawn around per-class mean directions. A trigger is
an additive direction ``t`` with strength ``tau`` followed by
renormalization, so triggered inputs stay on the unit sphere.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from core.rng import Rng
from utils.errors import ConfigError, DegenerateInputError, ShapeError

logger = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-9

# Rows whose norm falls below this before normalization are resampled
MIN_ROW_NORM = 1e-12


def _row_norms(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(m * m, axis=1))


@dataclass(frozen=True, eq=False)
class TaskSpec:
    """A C-class task with unit-norm class mean directions in R^d."""

    d: int
    num_classes: int
    class_means: np.ndarray
    noise_std: float
    seed: int

    def __post_init__(self):
        means = np.asarray(self.class_means, dtype=np.float64)
        object.__setattr__(self, "class_means", means)
        if self.num_classes < 2:
            raise ConfigError(f"A task needs at least 2 classes, got {self.num_classes}")
        if means.shape != (self.num_classes, self.d):
            raise ShapeError(f"class_means must be {self.num_classes}x{self.d}, got {means.shape}")
        if np.any(np.abs(_row_norms(means) - 1.0) > UNIT_NORM_TOL):
            raise ValueError("class means must be unit-norm")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got {self.noise_std}")
        for i in range(self.num_classes):
            for j in range(i + 1, self.num_classes):
                if np.array_equal(means[i], means[j]):
                    raise ValueError(f"class means {i} and {j} coincide")

    @classmethod
    def random(cls, d: int, num_classes: int, noise_std: float, seed: int) -> "TaskSpec":
        """Task whose class means are independent uniform directions drawn from ``seed``."""
        rng = Rng(seed).child("class_means")
        means = np.stack([rng.unit_vector(d) for _ in range(num_classes)])
        return cls(d=d, num_classes=num_classes, class_means=means, noise_std=noise_std, seed=seed)


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """Trigger direction ``t`` (unit norm), strength ``tau`` and backdoor target ``y_bd``."""

    t: np.ndarray
    tau: float
    y_bd: int

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        object.__setattr__(self, "t", t)
        if t.ndim != 1:
            raise ShapeError(f"trigger direction must be a vector, got shape {t.shape}")
        if abs(float(np.linalg.norm(t)) - 1.0) > UNIT_NORM_TOL:
            raise ValueError("trigger direction must be unit-norm")
        if self.tau < 0:
            raise ConfigError(f"tau must be non-negative, got {self.tau}")
        if self.y_bd < 0:
            raise ConfigError(f"y_bd must be a class index, got {self.y_bd}")

    @classmethod
    def random(cls, task: TaskSpec, tau: float, y_bd: int, rng: Rng) -> "TriggerSpec":
        """
        Draw a trigger direction orthogonal to every class mean of ``task``.

        The trigger then carries no evidence for any class, the feature-space
        analog of a rare token.
        """
        if y_bd >= task.num_classes:
            raise ConfigError(f"y_bd={y_bd} is not a class of a {task.num_classes}-class task")
        if task.d <= task.num_classes:
            raise ConfigError(f"d={task.d} leaves no room for a trigger orthogonal to {task.num_classes} means")
        basis, _ = np.linalg.qr(task.class_means.T)
        while True:
            t = rng.normal(task.d)
            t = t - basis @ (basis.T @ t)
            norm = float(np.linalg.norm(t))
            if norm > MIN_ROW_NORM:
                return cls(t=t / norm, tau=tau, y_bd=y_bd)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Unit-norm inputs with integer labels and a per-row poisoned flag."""

    inputs: np.ndarray
    labels: np.ndarray
    poisoned_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if self.poisoned_mask is None:
            mask = np.zeros(labels.shape[0], dtype=bool)
        else:
            mask = np.asarray(self.poisoned_mask, dtype=bool)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "poisoned_mask", mask)

        if inputs.ndim != 2:
            raise ShapeError(f"inputs must be n x d, got shape {inputs.shape}")
        n = inputs.shape[0]
        if labels.shape != (n,) or mask.shape != (n,):
            raise ShapeError(f"labels {labels.shape} and mask {mask.shape} must have length {n}")
        if n and np.any(labels < 0):
            raise ValueError("labels must be non-negative class indices")
        if n and np.any(np.abs(_row_norms(inputs) - 1.0) > UNIT_NORM_TOL):
            raise ValueError("dataset rows must be unit-norm")

    @property
    def n(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def d(self) -> int:
        return int(self.inputs.shape[1])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[indices], self.labels[indices], self.poisoned_mask[indices])

    def split(self, n_first: int) -> Tuple["Dataset", "Dataset"]:
        """Split into the first ``n_first`` rows and the rest."""
        if not 0 <= n_first <= self.n:
            raise ValueError(f"Cannot split {self.n} rows at {n_first}")
        head = np.arange(n_first)
        tail = np.arange(n_first, self.n)
        return self.subset(head), self.subset(tail)


def sample_clean(spec: TaskSpec, n: int, rng: Rng) -> Dataset:
    """
    Sample ``n`` clean rows with round-robin labels.

    Each row is ``normalize(class_mean[y] + noise)``; a draw that lands on
    the origin is resampled.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    labels = np.arange(n, dtype=np.int64) % spec.num_classes
    centers = spec.class_means[labels]
    rows = centers + rng.normal((n, spec.d), spec.noise_std)
    norms = _row_norms(rows)
    while np.any(norms < MIN_ROW_NORM):
        bad = np.flatnonzero(norms < MIN_ROW_NORM)
        logger.debug(f"Resampling {bad.size} degenerate rows")
        rows[bad] = centers[bad] + rng.normal((bad.size, spec.d), spec.noise_std)
        norms = _row_norms(rows)
    return Dataset(rows / norms[:, None], labels)


def apply_trigger(x, trig: TriggerSpec) -> np.ndarray:
    """Return ``normalize(x + tau * t)`` for a unit input ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != trig.t.shape:
        raise ShapeError(f"input of shape {x.shape} against trigger of shape {trig.t.shape}")
    if abs(float(np.linalg.norm(x)) - 1.0) > UNIT_NORM_TOL:
        raise ValueError("apply_trigger expects a unit-norm input")
    if trig.tau == 0:
        return x.copy()
    z = x + trig.tau * trig.t
    norm = float(np.linalg.norm(z))
    if norm < MIN_ROW_NORM:
        raise DegenerateInputError("trigger cancels the input (anti-parallel with tau = 1)")
    return z / norm


def apply_trigger_rows(inputs: np.ndarray, trig: TriggerSpec) -> np.ndarray:
    return np.stack([apply_trigger(row, trig) for row in inputs]) if len(inputs) else inputs.copy()


def poison(clean: Dataset, trig: TriggerSpec, n_poison: int, clean_label: bool, rng: Rng) -> Dataset:
    """
    Apply the trigger to ``n_poison`` rows chosen with ``rng``.

    Clean-label poisoning only triggers rows already labelled ``y_bd`` and
    never changes a label. Dirty-label poisoning triggers rows of the other
    classes and relabels them ``y_bd``.

    Raises:
        ConfigError: If fewer than ``n_poison`` candidate rows exist
    """
    if n_poison < 0 or n_poison > clean.n:
        raise ConfigError(f"n_poison={n_poison} outside [0, {clean.n}]")
    if n_poison == 0:
        return clean

    untouched = ~clean.poisoned_mask
    if clean_label:
        candidates = np.flatnonzero(untouched & (clean.labels == trig.y_bd))
    else:
        candidates = np.flatnonzero(untouched & (clean.labels != trig.y_bd))
    if candidates.size < n_poison:
        kind = "clean-label" if clean_label else "dirty-label"
        raise ConfigError(
            f"{kind} poisoning needs {n_poison} candidate rows, only {candidates.size} available",
            details={"candidates": int(candidates.size), "n_poison": n_poison},
        )

    chosen = np.sort(candidates[rng.choice(candidates.size, n_poison)])
    inputs = clean.inputs.copy()
    labels = clean.labels.copy()
    mask = clean.poisoned_mask.copy()
    inputs[chosen] = apply_trigger_rows(inputs[chosen], trig)
    if not clean_label:
        labels[chosen] = trig.y_bd
    mask[chosen] = True
    logger.info(f"Poisoned {n_poison}/{clean.n} rows ({'clean' if clean_label else 'dirty'} label, target {trig.y_bd})")
    return Dataset(inputs, labels, mask)


def proxy_shift(spec: TaskSpec, shift: float, rng: Rng) -> TaskSpec:
    """
    Rotate every class mean by the angle ``shift * pi / 2`` toward a random orthogonal direction.

    The result models a proxy distribution close to, but not identical
    with, the target task.
    """
    if not 0.0 <= shift < 1.0:
        raise ConfigError(f"shift must lie in [0, 1), got {shift}")
    if shift == 0.0:
        return TaskSpec(spec.d, spec.num_classes, spec.class_means.copy(), spec.noise_std, spec.seed)

    theta = shift * math.pi / 2.0
    shifted = []
    for mean in spec.class_means:
        while True:
            w = rng.unit_vector(spec.d)
            w = w - float(w @ mean) * mean
            norm = float(np.linalg.norm(w))
            if norm > MIN_ROW_NORM:
                break
        rotated = math.cos(theta) * mean + math.sin(theta) * (w / norm)
        shifted.append(rotated / np.linalg.norm(rotated))
    return TaskSpec(spec.d, spec.num_classes, np.stack(shifted), spec.noise_std, spec.seed)


def triggered_eval_set(dataset: Dataset, trig: TriggerSpec) -> Dataset:
    """
    Triggered copies of every row whose true label differs from ``y_bd``.

    Labels keep the true class; this is the sample base of the attack
    success rate.

    Raises:
        DegenerateInputError: If no row is eligible
    """
    eligible = np.flatnonzero(dataset.labels != trig.y_bd)
    if eligible.size == 0:
        raise DegenerateInputError("no test rows outside the backdoor target class, ASR undefined")
    inputs = apply_trigger_rows(dataset.inputs[eligible], trig)
    return Dataset(inputs, dataset.labels[eligible], np.ones(eligible.size, dtype=bool))
