"""
Training loops: poisoned pretraining of the backbone and downstream fine-tuning.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from core.linalg import gaussian_matrix
from core.rng import Rng
from data.synth import Dataset, TriggerSpec, triggered_eval_set
from models.lora import ModelStack, backward, predict
from models.method_presets import get_method_preset
from objectives.rora_loss import LossConfig, RoraObjective
from spectral.rescaling import apply_rescale, resolve_layers
from training.evaluation import attack_success_rate
from training.optimizer import AdamW
from utils.errors import ConfigError, NumericalError, PipelineTargetError

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ca: Optional[float] = None
    asr: Optional[float] = None


@dataclass
class TrainingHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def add(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def epochs(self) -> int:
        return len(self.records)

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else math.nan


@dataclass
class FinetuneResult:
    stack: ModelStack
    method: str
    toggles: Dict[str, bool]
    history: TrainingHistory


def init_backbone(cfg: Dict[str, Any], rng: Rng) -> ModelStack:
    """Freshly initialized backbone of the configured architecture, in fft mode."""
    d, c = cfg["d"], cfg["num_classes"]
    if cfg["architecture"] == "mlp":
        h = cfg["hidden"]
        w1 = gaussian_matrix(rng.child("hidden"), h, d, 1.0 / math.sqrt(d))
        w2 = gaussian_matrix(rng.child("out"), c, h, 1.0 / math.sqrt(h))
        return ModelStack.mlp(w1, w2, mode="fft")
    return ModelStack.linear(gaussian_matrix(rng.child("out"), c, d, 0.01), mode="fft")


def _run_epoch(data: Dataset, batch_size: int, order: np.ndarray, step_fn) -> float:
    """One pass over ``data`` in ``order``; returns the mean batch loss."""
    losses = []
    for start in range(0, data.n, batch_size):
        idx = order[start:start + batch_size]
        loss = step_fn(data.inputs[idx], data.labels[idx])
        if not math.isfinite(loss):
            raise NumericalError(f"Loss diverged ({loss}) after {len(losses)} batches", details={"loss": loss})
        losses.append(loss)
    return float(np.mean(losses))


def pretrain_poison(
    cfg: Dict[str, Any],
    poisoned_train: Dataset,
    heldout: Dataset,
    trig: TriggerSpec,
    rng: Rng,
    history: Optional[TrainingHistory] = None,
) -> ModelStack:
    """
    Full training of a fresh backbone on poisoned proxy data.

    Stops at the first epoch past ``pretrain_min_epochs`` whose held-out
    triggered ASR reaches ``pretrain_asr_target``.

    Args:
        cfg: Resolved experiment configuration
        poisoned_train: Proxy training set with poison applied
        heldout: Clean held-out proxy rows; their triggered copies measure the ASR
        trig: Trigger of the attack
        rng: Stream for initialization and batch order
        history: Receives one record per epoch when given

    Returns:
        The poisoned backbone in frozen mode

    Raises:
        PipelineTargetError: If the ASR target is not reached by ``pretrain_max_epochs``
    """
    stack = init_backbone(cfg, rng.child("init"))
    triggered = triggered_eval_set(heldout, trig)
    optimizer = AdamW(cfg["pretrain_lr"], cfg["pretrain_weight_decay"])
    batch_rng = rng.child("batches")
    history = history if history is not None else TrainingHistory()

    def step(inputs, labels):
        loss, grads = backward(stack, inputs, labels)
        stack.assign_parameters(optimizer.step(stack.trainable_parameters(), grads.tensors))
        return loss

    asr = 0.0
    for epoch in range(1, cfg["pretrain_max_epochs"] + 1):
        order = batch_rng.stream(epoch).permutation(poisoned_train.n)
        loss = _run_epoch(poisoned_train, cfg["batch_size"], order, step)
        ca = float(np.mean(predict(stack, heldout.inputs) == heldout.labels))
        asr = attack_success_rate(stack, triggered, trig.y_bd)
        history.add(EpochRecord(epoch, loss, ca, asr))
        logger.info(f"Pretrain epoch {epoch}: loss={loss:.4f} proxy CA={ca:.4f} ASR={asr:.4f}")
        if epoch >= cfg["pretrain_min_epochs"] and asr >= cfg["pretrain_asr_target"]:
            return stack.set_mode("frozen")

    raise PipelineTargetError(
        f"Poisoned pretraining reached ASR {asr:.3f} < {cfg['pretrain_asr_target']} after "
        f"{cfg['pretrain_max_epochs']} epochs; increase tau or n_poison",
        details={"asr": asr, "epochs": cfg["pretrain_max_epochs"]},
    )


def loss_config(cfg: Dict[str, Any], toggles: Dict[str, bool]) -> LossConfig:
    return LossConfig(lam=cfg["lam"], p=cfg["p"], k=cfg["k"], lora_dropout=cfg["lora_dropout"], **toggles)


def finetune(
    cfg: Dict[str, Any],
    poisoned: ModelStack,
    clean_train: Dataset,
    rng: Rng,
    method: Optional[str] = None,
    toggles: Optional[Any] = None,
    adapter_layers: Optional[Sequence[str]] = None,
) -> FinetuneResult:
    """
    Fine-tune a poisoned backbone on clean data.

    lora trains adapters on the frozen backbone, fft trains the backbone
    itself (adapters attached but ignored), rora trains adapters with weight
    dropout (``cl``) and the subspace penalty (``tr``) and rescales the
    selected layers afterwards (``pt``). frozen attaches adapters and stops.

    Args:
        cfg: Resolved experiment configuration
        poisoned: Backbone returned by ``pretrain_poison``
        clean_train: Clean downstream training set
        rng: Stream for adapter init, batch order and dropout masks
        method: Overrides ``cfg["method"]``
        toggles: RoRA toggles, defaults to ``cfg["toggles"]`` for rora
        adapter_layers: Layers with an active adapter (None for all)

    Raises:
        ConfigError: If the training set contains poisoned rows
        NumericalError: If the loss diverges
    """
    method = method or cfg["method"]
    if method == "rora" and toggles is None:
        toggles = cfg["toggles"]
    preset = get_method_preset(method, toggles if method == "rora" else None)
    if clean_train.poisoned_mask.any():
        raise ConfigError("Fine-tuning data must be clean")

    stack = poisoned.with_adapters(cfg["r"], cfg["alpha"], rng.child("adapters"), enabled=adapter_layers)
    history = TrainingHistory()
    if preset["mode"] == "frozen":
        return FinetuneResult(stack.set_mode("frozen"), method, preset["toggles"], history)
    if preset["mode"] == "fft":
        stack = stack.set_mode("fft")

    lcfg = loss_config(cfg, preset["toggles"])
    objective = RoraObjective(stack, lcfg)
    steps_per_epoch = math.ceil(clean_train.n / cfg["batch_size"])
    optimizer = AdamW(
        cfg["lr"], cfg["weight_decay"],
        total_steps=steps_per_epoch * cfg["epochs"], warmup_fraction=cfg["warmup_fraction"],
    )
    batch_rng = rng.child("batches")
    dropout_rng = rng.child("dropout")

    def step(inputs, labels):
        loss, grads = objective(stack, inputs, labels, rng=dropout_rng)
        stack.assign_parameters(optimizer.step(stack.trainable_parameters(), grads.tensors))
        return loss

    for epoch in range(1, cfg["epochs"] + 1):
        order = batch_rng.stream(epoch).permutation(clean_train.n)
        loss = _run_epoch(clean_train, cfg["batch_size"], order, step)
        history.add(EpochRecord(epoch, loss))
        logger.info(f"Fine-tune ({method}) epoch {epoch}: loss={loss:.4f}")

    if preset["toggles"]["pt"]:
        selected = [name for name in resolve_layers(stack, cfg["rescale_layers"]) if stack.layer(name).active]
        stack = apply_rescale(stack, selected)
    return FinetuneResult(stack, method, preset["toggles"], history)
