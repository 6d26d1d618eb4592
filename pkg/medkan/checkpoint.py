"""Binary checkpoint container: JSON config header followed by raw tensors.

Layout (all integers little-endian)::

    b"MDKN" | u32 version | u64 json_len | json | u32 count |
    count × ( u32 name_len | name | u8 dtype | u8 rank | rank × u64 | data )

Optimizer moments travel as ordinary tensors named ``adam.m.<param>`` and
``adam.v.<param>``; the remaining optimizer scalars sit in the JSON header.
"""
from __future__ import annotations

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from .config import MedKANConfig
from .errors import CheckpointError, ConfigError, ShapeError
from .model import MedKAN
from .optim import TrainState

logger = logging.getLogger(__name__)

MAGIC = b"MDKN"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAG_FOR = {dtype: tag for tag, dtype in DTYPE_TAGS.items()}
_MOMENT_PREFIX = ("adam.m.", "adam.v.")


@dataclass
class Checkpoint:
    config: MedKANConfig
    tensors: dict[str, np.ndarray]
    train_state: TrainState | None = None
    extra: dict[str, Any] = field(default_factory=dict)


class TensorEntry(NamedTuple):
    name: str
    dtype: np.dtype
    shape: tuple[int, ...]
    offset: int
    nbytes: int


def _encode(ckpt: Checkpoint) -> bytes:
    header: dict[str, Any] = {"model": ckpt.config.to_dict(), "extra": ckpt.extra}
    tensors = dict(ckpt.tensors)
    if ckpt.train_state is not None:
        header["train_state"] = ckpt.train_state.scalars()
        for name, value in ckpt.train_state.m.items():
            tensors[f"adam.m.{name}"] = value
        for name, value in ckpt.train_state.v.items():
            tensors[f"adam.v.{name}"] = value
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
        tag = _TAG_FOR.get(np.dtype(dtype))
        if tag is None:
            raise CheckpointError(f"Tensor {name} has unsupported dtype {array.dtype}")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", tag, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    """Write atomically: a temporary file in the target directory is renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = _encode(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    logger.debug("Checkpoint gespeichert: %s (%d Bytes)", path, len(data))
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path) -> None:
        self.data, self.pos, self.path = data, 0, path

    def take(self, size: int, what: str) -> bytes:
        end = self.pos + size
        if end > len(self.data):
            raise CheckpointError(f"Corrupt checkpoint {self.path}: truncated while reading {what}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode(data: bytes, path: Path) -> tuple[dict[str, Any], list[TensorEntry]]:
    reader = _Reader(data, path)
    if reader.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path} is not a MedKAN checkpoint (bad magic)")
    (version,) = reader.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {VERSION}")
    (json_len,) = reader.unpack("<Q", "header length")
    try:
        header = json.loads(reader.take(json_len, "JSON header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"Corrupt checkpoint {path}: unreadable JSON header") from exc

    (count,) = reader.unpack("<I", "tensor count")
    entries = []
    for index in range(count):
        (name_len,) = reader.unpack("<I", f"tensor {index} name length")
        name = reader.take(name_len, f"tensor {index} name").decode("utf-8")
        tag, rank = reader.unpack("<BB", f"tensor {name} dtype")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"Corrupt checkpoint {path}: tensor {name} has dtype tag {tag}")
        shape = reader.unpack(f"<{rank}Q", f"tensor {name} shape")
        dtype = DTYPE_TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        offset = reader.pos
        reader.take(nbytes, f"tensor {name} data")
        entries.append(TensorEntry(name, dtype, tuple(shape), offset, nbytes))
    if reader.pos != len(data):
        raise CheckpointError(f"Corrupt checkpoint {path}: {len(data) - reader.pos} trailing bytes")
    return header, entries


def checkpoint_layout(path: str | Path) -> list[TensorEntry]:
    """Byte offsets and sizes of every tensor payload in a checkpoint file."""
    path = Path(path)
    return _decode(path.read_bytes(), path)[1]


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Cannot read checkpoint {path}: {exc}") from exc
    header, entries = _decode(data, path)
    try:
        config = MedKANConfig.from_dict(header["model"])
    except (KeyError, ConfigError) as exc:
        raise CheckpointError(f"{path}: invalid model config in header: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    moments: dict[str, dict[str, np.ndarray]] = {"adam.m.": {}, "adam.v.": {}}
    for entry in entries:
        array = np.frombuffer(data, dtype=entry.dtype, count=int(np.prod(entry.shape, dtype=np.int64)),
                              offset=entry.offset).reshape(entry.shape).copy()
        prefix = next((p for p in _MOMENT_PREFIX if entry.name.startswith(p)), None)
        if prefix is None:
            tensors[entry.name] = array
        else:
            moments[prefix][entry.name[len(prefix):]] = array

    train_state = None
    if "train_state" in header:
        scalars = header["train_state"]
        train_state = TrainState(m=moments["adam.m."], v=moments["adam.v."], **scalars)
    return Checkpoint(config=config, tensors=tensors, train_state=train_state, extra=header.get("extra", {}))


def restore_model(ckpt: Checkpoint, dtype: Any = None) -> MedKAN:
    """Build a MedKAN for the checkpoint config and load its weights."""
    if dtype is None and ckpt.tensors:
        dtype = next(iter(ckpt.tensors.values())).dtype
    model = MedKAN(ckpt.config, dtype=dtype)
    try:
        model.load_state_dict(ckpt.tensors)
    except ShapeError as exc:
        raise CheckpointError(f"Checkpoint tensors do not fit its config: {exc}") from exc
    return model


__all__ = [
    "Checkpoint",
    "DTYPE_TAGS",
    "MAGIC",
    "TensorEntry",
    "VERSION",
    "checkpoint_layout",
    "load_checkpoint",
    "restore_model",
    "save_checkpoint",
]
