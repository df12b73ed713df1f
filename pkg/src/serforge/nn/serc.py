"""SERC checkpoint files: binary serialization of a ParameterSet.

Layout (all integers little-endian):

    magic   4 bytes  b"SERC"
    version u32      1
    count   u32      number of tensors
    per tensor:
        name_len u16
        name     UTF-8 bytes
        rank     u8
        dims     u32 * rank
        data     float32 * prod(dims), row-major

The file carries every entry of the ParameterSet, trainable weights and
batchnorm running statistics alike, so a checkpoint is sufficient to run the
model in eval mode. Values are stored as float32; a float32 set round-trips
bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .params import Parameter, ParameterSet

MAGIC = b"SERC"
VERSION = 1


def save_parameters(path, params: ParameterSet) -> None:
    """Write a ParameterSet to a SERC file."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, p in params.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name!r}")
        value = np.ascontiguousarray(p.value, dtype="<f4")
        if value.ndim > 0xFF:
            raise ValueError(f"parameter rank too large: {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(value.tobytes())
    path.write_bytes(b"".join(chunks))


def load_parameters(path) -> ParameterSet:
    """Read a SERC file back into a ParameterSet.

    Loaded tensors come back as float32 with ``trainable=True``; callers that
    load into a model re-bind trainability from the model's own definition.
    """
    path = Path(path)
    blob = path.read_bytes()
    offset = 0

    def need(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise FormatError(
                f"{path}: truncated {what} at offset {offset}: "
                f"expected {n} bytes, found {len(blob) - offset}"
            )
        piece = blob[offset : offset + n]
        offset += n
        return piece

    magic = need(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")

    params = ParameterSet()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", need(2, "name length"))
        name = need(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", need(1, "rank"))
        dims = struct.unpack(f"<{rank}I", need(4 * rank, "dims"))
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        if rank == 0:
            dims = ()
            n_bytes = 4
        data_off = offset
        raw = blob[offset : offset + n_bytes]
        if len(raw) != n_bytes:
            raise FormatError(
                f"{path}: tensor {name!r} at offset {data_off}: "
                f"expected {n_bytes} data bytes, found {len(raw)}"
            )
        offset += n_bytes
        value = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        params.add(Parameter(value, name=name))
    return params
