"""
The FLOWMAG1 checkpoint container.

Layout:
    8 bytes   magic b"FLOWMAG1"
    4 bytes   little-endian uint32 header length
    N bytes   UTF-8 JSON header (CheckpointHeader)
    ...       little-endian float32 payload: parameters, then buffers, then
              the optimizer's first and second moments, each in header order

The header holds no timestamps, so identical states serialize to identical
bytes.
"""

# Copyright 2025 Flowmag Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

from ..errors import ConfigError, ParseError
from .layers import Module
from .tensor import Array

MAGIC = b"FLOWMAG1"
FORMAT_VERSION = 1

_MODULE = "nn-core"
_FLOAT = np.dtype("<f4")


class TensorEntry(BaseModel):
    name: str
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class CheckpointHeader(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: str = "urbanfm"
    config: Dict[str, Any]
    train: Optional[Dict[str, Any]] = None
    params: List[TensorEntry]
    buffers: List[TensorEntry]
    optimizer_step: int = 0
    has_moments: bool = False
    extra: Dict[str, Any] = {}


@dataclass
class OptimizerState:
    """Adam state keyed by parameter name."""

    step: int = 0
    m: Dict[str, Array] = field(default_factory=dict)
    v: Dict[str, Array] = field(default_factory=dict)


@dataclass
class Checkpoint:
    header: CheckpointHeader
    params: Dict[str, Array]
    buffers: Dict[str, Array]
    optimizer: OptimizerState


def save_checkpoint(
    path: Union[str, Path],
    module: Module,
    config: Dict[str, Any],
    train: Optional[Dict[str, Any]] = None,
    optimizer: Optional[OptimizerState] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> None:
    """Write `module`'s parameters, buffers and optional optimizer state."""
    params = list(module.named_parameters())
    buffers = list(module.named_buffers())
    has_moments = optimizer is not None and bool(optimizer.m)
    header = CheckpointHeader(
        config=config,
        train=train,
        params=[TensorEntry(name=n, shape=p.shape) for n, p in params],
        buffers=[TensorEntry(name=n, shape=tuple(b.shape)) for n, b in buffers],
        optimizer_step=optimizer.step if optimizer is not None else 0,
        has_moments=has_moments,
        extra=extra or {},
    )
    blob = header.model_dump_json().encode("utf-8")

    chunks = [p.data for _, p in params] + [b for _, b in buffers]
    if has_moments:
        assert optimizer is not None
        chunks += [optimizer.m[n] for n, _ in params] + [optimizer.v[n] for n, _ in params]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(np.ascontiguousarray(chunk, dtype=_FLOAT).tobytes())


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint; raises ParseError on a malformed file."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ParseError(_MODULE, "not a FLOWMAG1 checkpoint (bad magic)", path)
    if len(raw) < len(MAGIC) + 4:
        raise ParseError(_MODULE, "truncated header length", path)
    (length,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = CheckpointHeader.model_validate_json(raw[start : start + length])
    except ValidationError as e:
        raise ParseError(_MODULE, f"invalid header: {e.error_count()} error(s)", path) from e
    if header.format_version != FORMAT_VERSION:
        raise ParseError(_MODULE, f"unsupported format version {header.format_version}", path)

    tail = len(raw) - start - length
    if tail < 0 or tail % _FLOAT.itemsize:
        raise ParseError(_MODULE, f"payload of {max(tail, 0)} bytes is not a whole number of float32 values", path)
    payload = np.frombuffer(raw, dtype=_FLOAT, offset=start + length)
    offset = 0

    def take(entries: List[TensorEntry]) -> Dict[str, Array]:
        nonlocal offset
        out: Dict[str, Array] = {}
        for entry in entries:
            end = offset + entry.size
            if end > payload.size:
                raise ParseError(_MODULE, f"payload truncated at {entry.name}", path)
            out[entry.name] = payload[offset:end].reshape(entry.shape).astype(np.float32)
            offset = end
        return out

    params = take(header.params)
    buffers = take(header.buffers)
    optimizer = OptimizerState(step=header.optimizer_step)
    if header.has_moments:
        optimizer.m = take(header.params)
        optimizer.v = take(header.params)
    if offset != payload.size:
        raise ParseError(_MODULE, f"{payload.size - offset} trailing values after payload", path)
    return Checkpoint(header=header, params=params, buffers=buffers, optimizer=optimizer)


def apply_checkpoint(module: Module, ckpt: Checkpoint) -> None:
    """Copy stored parameters and buffers into a module of identical structure."""
    expected = {n: p for n, p in module.named_parameters()}
    if set(expected) != set(ckpt.params):
        missing = sorted(set(expected) - set(ckpt.params))
        unexpected = sorted(set(ckpt.params) - set(expected))
        raise ConfigError(
            _MODULE, f"checkpoint does not match model (missing {missing}, unexpected {unexpected})"
        )
    for name, param in expected.items():
        value = ckpt.params[name]
        if value.shape != param.shape:
            raise ConfigError(_MODULE, f"parameter {name} expects shape {param.shape}, got {value.shape}")
        param.data = value.astype(param.dtype)
    for name, value in ckpt.buffers.items():
        module.set_buffer(name, value)
