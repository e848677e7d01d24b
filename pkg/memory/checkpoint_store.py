"""
Versioned binary checkpoints of named 2-D tensors.

Layout (all integers u32 little-endian):

    b"SLLB" | version | tensor count
    per tensor: name length | UTF-8 name | rows | cols | rows*cols f64 LE (row-major)
    trailer length | trailer text (JSON with the resolved config and metadata)

The trailer is kept as raw text so save -> load -> save reproduces the file
byte for byte.
"""

import logging
import os
import shutil
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from models.lora import LoraLayer, ModelStack
from utils.errors import BadMagicError, CheckpointError, TruncatedCheckpointError, VersionMismatchError
from utils.json_utils import dumps_canonical, parse_config_text

logger = logging.getLogger(__name__)

MAGIC = b"SLLB"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<4sII")

_write_lock = threading.Lock()


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    trailer: str = ""
    version: int = FORMAT_VERSION

    @property
    def document(self) -> Dict[str, Any]:
        """Parsed trailer (empty when the trailer is empty)."""
        if not self.trailer:
            return {}
        try:
            return parse_config_text(self.trailer, source="checkpoint trailer")
        except Exception as e:
            raise CheckpointError(f"Unreadable checkpoint trailer: {e}") from e

    @property
    def config(self) -> Dict[str, Any]:
        return self.document.get("config", {})

    @property
    def metadata(self) -> Dict[str, Any]:
        return self.document.get("metadata", {})


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [_HEADER.pack(MAGIC, ckpt.version, len(ckpt.tensors))]
    for name, tensor in ckpt.tensors.items():
        arr = np.asarray(tensor, dtype=np.float64)
        if arr.ndim != 2:
            raise CheckpointError(f"Tensor {name} must be 2-D, got shape {arr.shape}")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(arr.shape[0]))
        parts.append(_U32.pack(arr.shape[1]))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    trailer = ckpt.trailer.encode("utf-8")
    parts.append(_U32.pack(len(trailer)))
    parts.append(trailer)
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"Checkpoint truncated while reading {what} (need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        BadMagicError: If the file does not start with ``SLLB``
        VersionMismatchError: If the format version is not supported
        TruncatedCheckpointError: If the content ends early or has stray bytes
    """
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    reader = _Reader(data)
    _, version, count = _HEADER.unpack(reader.take(_HEADER.size, "header"))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"Checkpoint version {version}, this build reads version {FORMAT_VERSION}")

    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = reader.u32(f"name length of tensor {i}")
        try:
            name = reader.take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError as e:
            raise TruncatedCheckpointError(f"Tensor {i} has an undecodable name") from e
        rows = reader.u32(f"rows of {name}")
        cols = reader.u32(f"cols of {name}")
        raw = reader.take(rows * cols * 8, f"data of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)

    trailer_len = reader.u32("trailer length")
    try:
        trailer = reader.take(trailer_len, "trailer").decode("utf-8")
    except UnicodeDecodeError as e:
        raise TruncatedCheckpointError("Trailer is not valid UTF-8") from e
    if reader.pos != len(data):
        raise TruncatedCheckpointError(
            f"{len(data) - reader.pos} stray bytes after the trailer; tensor count {count} does not match the content"
        )
    return Checkpoint(tensors=tensors, trailer=trailer, version=version)


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` to ``path`` through a temporary file in the same directory."""
    payload = encode_checkpoint(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with _write_lock:
        fd, temp_file = tempfile.mkstemp(prefix=".ckpt_", suffix=".tmp", dir=directory)
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(payload)
            shutil.move(temp_file, path)
        except Exception:
            if os.path.exists(temp_file):
                os.remove(temp_file)
            raise
    logger.info(f"Saved checkpoint with {len(ckpt.tensors)} tensors to {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    with open(path, "rb") as f:
        data = f.read()
    ckpt = decode_checkpoint(data)
    logger.debug(f"Loaded checkpoint {path}: {len(ckpt.tensors)} tensors")
    return ckpt


def stack_to_checkpoint(
    stack: ModelStack,
    config: Dict[str, Any],
    metadata: Optional[Dict[str, Any]] = None,
    extra_tensors: Optional[Dict[str, np.ndarray]] = None,
) -> Checkpoint:
    """
    Pack a model, its resolved config and run metadata into a checkpoint.

    Layer tensors are named ``<layer>.w_pre``, ``<layer>.a`` and ``<layer>.b``.
    """
    tensors: Dict[str, np.ndarray] = {}
    layers = []
    for layer in stack.layers:
        tensors[f"{layer.name}.w_pre"] = layer.w_pre
        if layer.has_adapter:
            tensors[f"{layer.name}.a"] = layer.a
            tensors[f"{layer.name}.b"] = layer.b
        layers.append({
            "name": layer.name,
            "r": layer.r,
            "alpha": layer.alpha,
            "scale": layer.scale,
            "enabled": layer.enabled,
        })
    tensors.update(extra_tensors or {})
    meta = dict(metadata or {})
    meta.update({"mode": stack.mode, "activation": stack.activation, "layers": layers})
    return Checkpoint(tensors=tensors, trailer=dumps_canonical({"config": config, "metadata": meta}))


def stack_from_checkpoint(ckpt: Checkpoint) -> ModelStack:
    meta = ckpt.metadata
    if "layers" not in meta:
        raise CheckpointError("Checkpoint carries no model metadata")
    layers = []
    for info in meta["layers"]:
        name = info["name"]
        try:
            w_pre = ckpt.tensors[f"{name}.w_pre"]
        except KeyError as e:
            raise CheckpointError(f"Checkpoint is missing tensor {e}") from e
        a = ckpt.tensors.get(f"{name}.a")
        b = ckpt.tensors.get(f"{name}.b")
        layers.append(
            LoraLayer(
                name=name,
                w_pre=w_pre.copy(),
                a=None if a is None else a.copy(),
                b=None if b is None else b.copy(),
                alpha=float(info.get("alpha", 1.0)),
                enabled=bool(info.get("enabled", True)),
                scale=info.get("scale"),
            )
        )
    return ModelStack(layers, mode=meta.get("mode", "frozen"), activation=meta.get("activation", "tanh"))
