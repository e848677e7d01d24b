"""
Frozen-backbone classifiers with LoRA adapters.

A stack is either a single linear layer or a two-layer MLP with a tanh
between the layers. In fft mode the adapters are ignored. Every layer owns a pretrained weight ``w_pre`` and, once
adapters are attached, trainable factors ``b`` (out x r) and ``a`` (r x in).
The effective weight at scale ``s`` is

    W = (mask * w_pre) / (1 - p) + s * b @ a

with the masked term replaced by ``w_pre`` when no dropout mask is given.
While training, the adapter path may also read a dropped-out copy of the
layer input (LoRA dropout). Gradients are derived by hand and averaged over
the batch.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.linalg import as_matrix, gaussian_matrix, zeros
from core.rng import Rng
from objectives.orthogonality import PretrainedSubspace, omega, omega_grads
from utils.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

MODES = ("frozen", "fft", "lora")
ACTIVATIONS = {"tanh"}

Scales = Union[None, float, Sequence[float]]


@dataclass
class LoraLayer:
    """Pretrained weight plus an optional rank-r adapter ``b @ a``."""

    name: str
    w_pre: np.ndarray
    a: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    alpha: float = 1.0
    enabled: bool = True
    # inference-time scale set by post-training rescaling, replaces alpha / r
    scale: Optional[float] = None

    def __post_init__(self):
        self.w_pre = as_matrix(self.w_pre, f"{self.name}.w_pre")
        if (self.a is None) != (self.b is None):
            raise ShapeError(f"Layer {self.name}: adapter factors must be set together")
        if self.a is not None:
            self.a = np.asarray(self.a, dtype=np.float64)
            self.b = np.asarray(self.b, dtype=np.float64)
            r = self.a.shape[0]
            if self.a.shape != (r, self.in_dim) or self.b.shape != (self.out_dim, r):
                raise ShapeError(
                    f"Layer {self.name}: A{self.a.shape} and B{self.b.shape} do not fit w_pre{self.w_pre.shape}"
                )
            if r < 1 or r > min(self.w_pre.shape):
                raise ShapeError(f"Layer {self.name}: rank {r} outside [1, {min(self.w_pre.shape)}]")

    @property
    def out_dim(self) -> int:
        return int(self.w_pre.shape[0])

    @property
    def in_dim(self) -> int:
        return int(self.w_pre.shape[1])

    @property
    def has_adapter(self) -> bool:
        return self.a is not None

    @property
    def active(self) -> bool:
        return self.has_adapter and self.enabled

    @property
    def r(self) -> int:
        return int(self.a.shape[0]) if self.has_adapter else 0

    @property
    def s_train(self) -> float:
        return self.alpha / self.r if self.has_adapter else 0.0

    @property
    def inference_scale(self) -> float:
        return self.scale if self.scale is not None else self.s_train

    def delta(self) -> np.ndarray:
        """The update ``b @ a`` (zero when no adapter is attached)."""
        if not self.has_adapter:
            return zeros(self.out_dim, self.in_dim)
        return self.b @ self.a

    def effective_weight(self, s: float, mask: Optional["DropoutMask"] = None) -> np.ndarray:
        base = self.w_pre if mask is None else mask.apply(self.w_pre)
        if not self.active or s == 0.0:
            return base
        return base + s * (self.b @ self.a)

    def copy(self) -> "LoraLayer":
        return replace(
            self,
            w_pre=self.w_pre.copy(),
            a=None if self.a is None else self.a.copy(),
            b=None if self.b is None else self.b.copy(),
        )


@dataclass(frozen=True, eq=False)
class DropoutMask:
    """Entrywise keep-mask on a pretrained weight with inverted scaling."""

    mask: np.ndarray
    p: float

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError(f"Dropout rate must lie in [0, 1), got {self.p}")
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("Dropout mask entries must be 0 or 1")

    @property
    def inverted_scale(self) -> float:
        return 1.0 / (1.0 - self.p)

    @classmethod
    def sample(cls, shape: Tuple[int, int], p: float, rng: Rng) -> "DropoutMask":
        return cls(mask=rng.keep_mask(shape, p), p=p)

    @classmethod
    def ones(cls, shape: Tuple[int, int]) -> "DropoutMask":
        return cls(mask=np.ones(shape, dtype=np.float64), p=0.0)

    def apply(self, w: np.ndarray) -> np.ndarray:
        if self.mask.shape != w.shape:
            raise ShapeError(f"Mask of shape {self.mask.shape} on weight of shape {w.shape}")
        return (self.mask * w) * self.inverted_scale


@dataclass
class ModelStack:
    """Ordered layers with a tanh between consecutive layers."""

    layers: List[LoraLayer]
    mode: str = "frozen"
    activation: str = "tanh"

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("A model needs at least one layer")
        if self.mode not in MODES:
            raise ConfigError(f"Unknown mode '{self.mode}', expected one of {MODES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"Unsupported activation '{self.activation}'")
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"Layer names must be unique, got {names}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"Layer {prev.name} emits {prev.out_dim} features, {nxt.name} expects {nxt.in_dim}")

    @classmethod
    def linear(cls, w, mode: str = "frozen") -> "ModelStack":
        return cls([LoraLayer("out", w)], mode=mode)

    @classmethod
    def mlp(cls, w1, w2, mode: str = "frozen") -> "ModelStack":
        return cls([LoraLayer("hidden", w1), LoraLayer("out", w2)], mode=mode)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def layer(self, name: str) -> LoraLayer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(f"No layer named '{name}'")

    def copy(self) -> "ModelStack":
        return ModelStack([layer.copy() for layer in self.layers], mode=self.mode, activation=self.activation)

    def set_mode(self, mode: str) -> "ModelStack":
        """Copy of the stack in another mode."""
        return replace(self.copy(), mode=mode)

    def with_adapters(
        self,
        r: int,
        alpha: float,
        rng: Rng,
        enabled: Optional[Sequence[str]] = None,
    ) -> "ModelStack":
        """
        Copy of the stack in lora mode with fresh adapters on every layer.

        A is drawn from N(0, 1/r) and B is zero, so the update starts at zero.
        The rank is clipped to min(out, in) per layer.

        Args:
            r: Requested adapter rank
            alpha: LoRA alpha; the training scale is alpha / r
            rng: Stream for A; each layer draws from its own named child
            enabled: Names of layers whose adapter is active (None for all)
        """
        if r < 1:
            raise ConfigError(f"LoRA rank must be positive, got {r}")
        if enabled is not None:
            unknown = set(enabled) - set(self.layer_names)
            if unknown:
                raise ConfigError(f"Unknown adapter layers {sorted(unknown)}")
        layers = []
        for layer in self.layers:
            rank = min(r, layer.out_dim, layer.in_dim)
            if rank < r:
                logger.warning(f"Clipping LoRA rank {r} to {rank} on layer {layer.name} {layer.w_pre.shape}")
            a = gaussian_matrix(rng.child(f"lora.{layer.name}"), rank, layer.in_dim, math.sqrt(1.0 / rank))
            layers.append(
                LoraLayer(
                    name=layer.name,
                    w_pre=layer.w_pre.copy(),
                    a=a,
                    b=zeros(layer.out_dim, rank),
                    alpha=alpha,
                    enabled=enabled is None or layer.name in enabled,
                )
            )
        return ModelStack(layers, mode="lora", activation=self.activation)

    def layer_scales(self, s: Scales = None, training: bool = False) -> List[float]:
        """
        Per-layer adapter scales.

        A scalar ``s`` applies to every layer, a sequence gives one value per
        layer, and None picks alpha / r while training and the inference
        scale otherwise.
        """
        if s is None:
            return [layer.s_train if training else layer.inference_scale for layer in self.layers]
        if np.isscalar(s):
            values = [float(s)] * len(self.layers)
        else:
            values = [float(v) for v in s]
            if len(values) != len(self.layers):
                raise ShapeError(f"Got {len(values)} scales for {len(self.layers)} layers")
        if any(v < 0 for v in values):
            raise ValueError(f"Scales must be non-negative, got {values}")
        return values

    def trainable_names(self) -> List[str]:
        if self.mode == "fft":
            return [f"{layer.name}.w_pre" for layer in self.layers]
        if self.mode == "lora":
            names = []
            for layer in self.layers:
                if layer.active:
                    names += [f"{layer.name}.a", f"{layer.name}.b"]
            return names
        return []

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for name in self.trainable_names():
            layer_name, tensor = name.rsplit(".", 1)
            params[name] = getattr(self.layer(layer_name), tensor)
        return params

    def assign_parameters(self, params: Dict[str, np.ndarray]) -> None:
        allowed = set(self.trainable_names())
        for name, value in params.items():
            if name not in allowed:
                raise ConfigError(f"'{name}' is not trainable in {self.mode} mode")
            layer_name, tensor = name.rsplit(".", 1)
            layer = self.layer(layer_name)
            if value.shape != getattr(layer, tensor).shape:
                raise ShapeError(f"Shape mismatch assigning {name}: {value.shape}")
            setattr(layer, tensor, value)


@dataclass
class ForwardCache:
    """
    Per-layer inputs and weights of one batched forward pass.

    ``weights`` holds the full effective weight, or only the (masked)
    pretrained part when the adapter path reads a dropped-out copy of the
    input, which is then kept in ``adapter_inputs``.
    """

    inputs: List[np.ndarray] = field(default_factory=list)
    weights: List[np.ndarray] = field(default_factory=list)
    adapter_inputs: List[Optional[np.ndarray]] = field(default_factory=list)


@dataclass
class Gradients:
    """Gradients keyed like ``ModelStack.trainable_parameters``."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def norm(self) -> float:
        return math.sqrt(sum(float(np.sum(g * g)) for g in self.tensors.values()))


def _masks_for(stack: ModelStack, masks) -> List[Optional[DropoutMask]]:
    if masks is None:
        return [None] * len(stack.layers)
    masks = list(masks)
    if len(masks) != len(stack.layers):
        raise ShapeError(f"Got {len(masks)} dropout masks for {len(stack.layers)} layers")
    return masks


def forward_batch(
    stack: ModelStack,
    inputs,
    s: Scales = None,
    masks=None,
    adapter_masks=None,
) -> Tuple[np.ndarray, ForwardCache]:
    """
    Logits (n x C) for a batch of row inputs, plus the cache needed by ``backward``.

    ``adapter_masks`` holds one DropoutMask over the layer input (n x in) per
    layer, or None. A masked layer computes
    ``h W_base^T + s * drop(h) A^T B^T``; fft mode ignores these masks.
    """
    h = np.asarray(inputs, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != stack.input_dim:
        raise ShapeError(f"Expected inputs of shape (n, {stack.input_dim}), got {h.shape}")
    scales = stack.layer_scales(s)
    if stack.mode == "fft":
        # adapters are ignored while the backbone itself is trained
        scales = [0.0] * len(scales)
    cache = ForwardCache()
    last = len(stack.layers) - 1
    layer_masks = _masks_for(stack, masks)
    input_masks = _masks_for(stack, adapter_masks)
    for i, (layer, scale, mask, input_mask) in enumerate(zip(stack.layers, scales, layer_masks, input_masks)):
        cache.inputs.append(h)
        if input_mask is not None and layer.active and scale != 0.0:
            base = layer.effective_weight(0.0, mask)
            dropped = input_mask.apply(h)
            cache.weights.append(base)
            cache.adapter_inputs.append(dropped)
            h = h @ base.T + scale * ((dropped @ layer.a.T) @ layer.b.T)
        else:
            w = layer.effective_weight(scale, mask)
            cache.weights.append(w)
            cache.adapter_inputs.append(None)
            h = h @ w.T
        if i < last:
            h = np.tanh(h)
    return h, cache


def forward(stack: ModelStack, x, s: Scales = None, masks=None) -> np.ndarray:
    """Logits (length C) for a single input vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"forward expects a vector, got shape {x.shape}")
    logits, _ = forward_batch(stack, x[None, :], s, masks)
    return logits[0]


def predict(stack: ModelStack, inputs, s: Scales = None) -> np.ndarray:
    logits, _ = forward_batch(stack, inputs, s)
    return np.argmax(logits, axis=1)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def loss_ce(logits, y: int) -> float:
    """Softmax cross-entropy ``-log softmax(logits)[y]`` with max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= y < logits.shape[-1]:
        raise ValueError(f"Label {y} outside [0, {logits.shape[-1]})")
    z = logits - np.max(logits)
    return float(np.log(np.sum(np.exp(z))) - z[y])


def grad_logits(logits, y: int) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= y < logits.shape[-1]:
        raise ValueError(f"Label {y} outside [0, {logits.shape[-1]})")
    g = softmax(logits)
    g[y] -= 1.0
    return g


def batch_loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy over a batch."""
    z = logits - np.max(logits, axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(z), axis=1))
    picked = z[np.arange(labels.shape[0]), labels]
    return float(np.mean(log_norm - picked))


def backward(
    stack: ModelStack,
    inputs,
    labels,
    s: Scales = None,
    masks=None,
    lam: float = 0.0,
    subspaces: Optional[Dict[str, PretrainedSubspace]] = None,
    wrt: Optional[Sequence[str]] = None,
    adapter_masks=None,
) -> Tuple[float, Gradients]:
    """
    Batch-mean loss ``L_sup + lam * sum(omega)`` and its gradients.

    In lora mode gradients flow to ``a`` and ``b`` of every active layer and
    the (possibly masked) pretrained path is a constant. In fft mode the
    gradient goes to ``w_pre`` through the mask. The penalty is only added
    for layers with an entry in ``subspaces``.

    Args:
        stack: Model
        inputs: Batch rows (n x in)
        labels: Class indices (n)
        s: Adapter scales, see ``ModelStack.layer_scales``
        masks: One DropoutMask (or None) per layer, held fixed for the step
        lam: Penalty weight
        subspaces: Pretrained subspaces by layer name
        wrt: Tensor names whose gradients are requested (default: all trainable)
        adapter_masks: One DropoutMask (or None) per layer over the adapter input

    Returns:
        (loss, Gradients)

    Raises:
        ConfigError: If ``wrt`` names a tensor that is not trainable in this mode
    """
    labels = np.asarray(labels, dtype=np.int64)
    trainable = stack.trainable_names()
    if wrt is not None:
        missing = [name for name in wrt if name not in trainable]
        if missing:
            raise ConfigError(f"Cannot differentiate {missing} in {stack.mode} mode")
    wanted = set(trainable if wrt is None else wrt)

    scales = stack.layer_scales(s)
    layer_masks = _masks_for(stack, masks)
    input_masks = _masks_for(stack, adapter_masks)
    logits, cache = forward_batch(stack, inputs, scales, layer_masks, input_masks)
    n = labels.shape[0]
    if logits.shape[0] != n:
        raise ShapeError(f"{logits.shape[0]} inputs against {n} labels")
    if np.any(labels < 0) or np.any(labels >= stack.num_classes):
        raise ValueError("labels outside the class range")
    loss = batch_loss(logits, labels)

    g = softmax(logits)
    g[np.arange(n), labels] -= 1.0
    g /= n

    grads: Dict[str, np.ndarray] = {}
    for i in range(len(stack.layers) - 1, -1, -1):
        layer = stack.layers[i]
        h_in = cache.inputs[i]
        g_w = g.T @ h_in
        if stack.mode == "fft":
            mask = layer_masks[i]
            grads[f"{layer.name}.w_pre"] = g_w if mask is None else mask.apply(g_w)
        elif stack.mode == "lora" and layer.active:
            scale = scales[i]
            dropped = cache.adapter_inputs[i]
            g_adapter = g_w if dropped is None else g.T @ dropped
            grads[f"{layer.name}.a"] = scale * (layer.b.T @ g_adapter)
            grads[f"{layer.name}.b"] = scale * (g_adapter @ layer.a.T)
        if i > 0:
            g_h = g @ cache.weights[i]
            if cache.adapter_inputs[i] is not None:
                g_h = g_h + input_masks[i].apply(scales[i] * ((g @ layer.b) @ layer.a))
            g = g_h * (1.0 - h_in * h_in)

    if lam and subspaces and stack.mode == "lora":
        penalty = 0.0
        for layer in stack.layers:
            sub = subspaces.get(layer.name)
            if sub is None or not layer.active:
                continue
            penalty += omega(layer.a, layer.b, sub)
            d_a, d_b = omega_grads(layer.a, layer.b, sub)
            grads[f"{layer.name}.a"] = grads[f"{layer.name}.a"] + lam * d_a
            grads[f"{layer.name}.b"] = grads[f"{layer.name}.b"] + lam * d_b
        loss += lam * penalty

    return loss, Gradients({name: grads[name] for name in trainable if name in wanted})
