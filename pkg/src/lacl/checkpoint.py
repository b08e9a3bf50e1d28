"""Binary checkpoints holding both branches, optimizer velocity, the step
counter and (optionally) the queue.

Layout, little-endian throughout::

    "LACL"  u32 version
    u32 input_dim, hidden_dim, backbone_dim, proj_hidden, contrast_dim
    u64 step
    u32 flags            bit 0: velocity present, bit 1: queue present
    float64 arrays of theta_q, then theta_k, then velocity, each in
    PARAM_NAMES order, row-major
    queue block: u32 K, u32 M, u32 dim, K x u64 lengths, K x u64 heads,
                 K*M*dim float64 slot buffer
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FileFormatError, ShapeMismatchError, TruncatedFileError
from .model import PARAM_NAMES, ModelDims, ModelParams
from .queue import LesionQueue

MAGIC = b"LACL"
VERSION = 1
_HEAD = struct.Struct("<4sI5IQI")
_QHEAD = struct.Struct("<3I")


@dataclass
class Checkpoint:
    params_q: ModelParams
    params_k: ModelParams
    velocity: ModelParams | None = None
    step: int = 0
    queue: LesionQueue | None = None

    @property
    def dims(self) -> ModelDims:
        return self.params_q.dims


def to_bytes(ckpt: Checkpoint) -> bytes:
    dims = ckpt.params_q.dims
    ckpt.params_q.check_compatible(ckpt.params_k)
    flags = (1 if ckpt.velocity is not None else 0) | (2 if ckpt.queue is not None else 0)
    parts = [_HEAD.pack(MAGIC, VERSION, *dims.as_tuple(), int(ckpt.step), flags)]
    for p in (ckpt.params_q, ckpt.params_k, ckpt.velocity):
        if p is None:
            continue
        p.check_compatible(ckpt.params_q)
        parts.extend(np.ascontiguousarray(t, dtype="<f8").tobytes() for _, t in p.items())
    if ckpt.queue is not None:
        buf, lens, heads = ckpt.queue.state_arrays()
        parts.append(_QHEAD.pack(*buf.shape))
        parts.append(lens.astype("<u8").tobytes())
        parts.append(heads.astype("<u8").tobytes())
        parts.append(np.ascontiguousarray(buf, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, blob: bytes, name: str):
        self.blob, self.off, self.name = blob, 0, name

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise TruncatedFileError(f"{self.name}: truncated at byte {len(self.blob)} (needed {self.off + n})")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def array(self, dtype: str, shape) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def from_bytes(blob: bytes, expected_dims: ModelDims | None = None, name: str = "<bytes>") -> Checkpoint:
    r = _Reader(blob, name)
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FileFormatError(f"{name}: not a checkpoint (bad magic)")
    magic, version, *dims_t, step, flags = _HEAD.unpack(r.take(_HEAD.size))
    if version != VERSION:
        raise FileFormatError(f"{name}: unsupported checkpoint version {version}")
    try:
        dims = ModelDims(*dims_t)
    except ValueError as exc:
        raise FileFormatError(f"{name}: invalid architecture header: {exc}") from exc
    if expected_dims is not None and dims != expected_dims:
        raise ShapeMismatchError(f"{name}: checkpoint dims {dims} != expected {expected_dims}")
    shapes = dims.shapes()

    def read_params():
        return ModelParams(dims, {n: r.array("<f8", shapes[n]) for n in PARAM_NAMES})

    pq, pk = read_params(), read_params()
    vel = read_params() if flags & 1 else None
    queue = None
    if flags & 2:
        K, M, D = _QHEAD.unpack(r.take(_QHEAD.size))
        lens = r.array("<u8", (K,)).astype(np.int64)
        heads = r.array("<u8", (K,)).astype(np.int64)
        buf = r.array("<f8", (K, M, D))
        queue = LesionQueue.from_state(buf, lens, heads)
    if r.off != len(blob):
        raise FileFormatError(f"{name}: {len(blob) - r.off} unexpected trailing bytes")
    return Checkpoint(pq, pk, vel, int(step), queue)


def load_checkpoint(path, expected_dims: ModelDims | None = None) -> Checkpoint:
    path = Path(path)
    return from_bytes(path.read_bytes(), expected_dims, str(path))
