"""Frame-level feature sequences and the SERF on-disk format.

SERF layout (little-endian): magic b"SERF", u32 version=1, u32 T, u32 D,
then T*D float32 values row-major. The filename stem is the utterance id.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, FrameAlignmentError

MAGIC = b"SERF"
VERSION = 1

EARLY_FUSE_TOLERANCE = 2


@dataclass(frozen=True)
class FeatureSequence:
    """A (T, D) float32 feature matrix with provenance."""

    utt_id: str
    source: str
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DataError(
                f"{self.utt_id or '<features>'}: expected a non-empty (T, D) matrix, "
                f"got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError(f"{self.utt_id or '<features>'}: non-finite feature values")

    @property
    def num_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def write_features(path, data: np.ndarray) -> None:
    """Write a (T, D) matrix as a SERF file."""
    path = Path(path)
    data = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    if data.ndim != 2:
        raise DataError(f"SERF stores (T, D) matrices, got shape {data.shape}")
    t, d = data.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, t, d))
        fh.write(data.tobytes())


def load_features(path, source: str | None = None) -> FeatureSequence:
    """Load a SERF file; the utterance id is the filename stem."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at offset 0, expected {MAGIC!r}")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated header: expected 16 bytes, found {len(blob)}")
    version, t, d = struct.unpack("<III", blob[4:16])
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if t == 0:
        raise DataError(f"{path}: empty feature sequence (T=0)")
    if d == 0:
        raise DataError(f"{path}: zero-dimensional features (D=0)")
    need = 4 * t * d
    payload = blob[16:]
    if len(payload) != need:
        raise FormatError(f"{path}: expected {need} data bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, d).copy()
    return FeatureSequence(utt_id=path.stem, source=source or f"file:{path.stem}", data=data)


def early_fuse(a: FeatureSequence, b: FeatureSequence) -> FeatureSequence:
    """Frame-wise concatenation of two feature streams.

    Both streams are truncated to the shorter length, which may differ by at
    most EARLY_FUSE_TOLERANCE frames; larger gaps indicate misaligned
    front ends and are rejected.
    """
    if a.utt_id != b.utt_id:
        raise DataError(f"cannot fuse features of different utterances: "
                        f"{a.utt_id!r} vs {b.utt_id!r}")
    ta, tb = a.num_frames, b.num_frames
    if abs(ta - tb) > EARLY_FUSE_TOLERANCE:
        raise FrameAlignmentError(
            f"{a.utt_id}: frame counts {ta} and {tb} differ by {abs(ta - tb)} "
            f"(> {EARLY_FUSE_TOLERANCE}); streams are not frame-aligned")
    t = min(ta, tb)
    fused = np.concatenate([a.data[:t], b.data[:t]], axis=1)
    return FeatureSequence(utt_id=a.utt_id, source=f"early({a.source}+{b.source})", data=fused)
