"""
Checkpoint files.

Layout: magic ``QGCK``, u32 little-endian header length, a UTF-8 JSON header
(architecture config, seed, step count, tensor names and shapes, sorted keys),
then one ``QG64`` grid block per tensor in declaration order. Values are stored
as float64, so a reload reproduces every parameter bit for bit.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from src.exceptions import GridFormatError, ShapeMismatchError
from src.gridio import MAGIC_F64, read_grid, write_grid
from src.models import ModelConfig

MAGIC = b"QGCK"
_LENGTH = struct.Struct("<I")


@dataclass
class Checkpoint:
    config: ModelConfig
    seed: int
    step: int
    tensors: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    extra: Dict[str, object] = field(default_factory=dict)

    def header(self) -> Dict[str, object]:
        return {
            "config": self.config.model_dump(mode="json"),
            "seed": self.seed,
            "step": self.step,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.tensors.items()],
            "buffers": [{"name": k, "shape": list(v.shape)} for k, v in self.buffers.items()],
            "extra": self.extra,
        }


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    header = json.dumps(checkpoint.header(), sort_keys=True).encode("utf-8")
    stream = io.BytesIO()
    stream.write(MAGIC)
    stream.write(_LENGTH.pack(len(header)))
    stream.write(header)
    for value in list(checkpoint.tensors.values()) + list(checkpoint.buffers.values()):
        write_grid(stream, np.asarray(value, dtype=np.float64).reshape(1, 1, -1), MAGIC_F64)
    return stream.getvalue()


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> str:
    """Write the checkpoint; returns the sha256 of the bytes written."""
    payload = checkpoint_bytes(checkpoint)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


def _read_blocks(stream, entries) -> Dict[str, np.ndarray]:
    blocks = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        flat = read_grid(stream)
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeMismatchError(f"tensor {entry['name']} does not match its declared shape")
        blocks[entry["name"]] = flat.reshape(shape)
    return blocks


def load_checkpoint(path: Path, expected_config: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Read a checkpoint written by ``save_checkpoint``.

    Raises:
        GridFormatError: wrong magic or truncated file
        ShapeMismatchError: a block disagrees with the header
    """
    stream = io.BytesIO(Path(path).read_bytes())
    if stream.read(4) != MAGIC:
        raise GridFormatError("not a checkpoint file")
    raw_length = stream.read(_LENGTH.size)
    if len(raw_length) != _LENGTH.size:
        raise GridFormatError("truncated checkpoint header")
    (length,) = _LENGTH.unpack(raw_length)
    raw_header = stream.read(length)
    if len(raw_header) != length:
        raise GridFormatError("truncated checkpoint header")
    header = json.loads(raw_header.decode("utf-8"))
    config = ModelConfig(**header["config"])
    if expected_config is not None and expected_config != config:
        raise ValueError("checkpoint was trained with a different architecture")
    tensors = _read_blocks(stream, header["tensors"])
    buffers = _read_blocks(stream, header.get("buffers", []))
    return Checkpoint(
        config=config, seed=header["seed"], step=header["step"],
        tensors=tensors, buffers=buffers, extra=header.get("extra", {}),
    )
