"""Class-partitioned FIFO memory of unit-norm keys.

One fixed-capacity ring buffer per class. With ``num_classes == 1`` the same
structure serves as an undifferentiated memory bank.
"""

from __future__ import annotations

import logging

import numpy as np

from .errors import InvalidClassError, InvalidConfigError, NormalizationError

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6


class LesionQueue:
    def __init__(self, num_classes: int, capacity: int, dim: int) -> None:
        """``capacity`` is the per-class capacity M."""
        if num_classes < 1 or capacity < 1 or dim < 1:
            raise InvalidConfigError(
                f"queue needs positive K, M and dim (got {num_classes}, {capacity}, {dim})"
            )
        self.num_classes = int(num_classes)
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((self.num_classes, self.capacity, self.dim))
        self._len = np.zeros(self.num_classes, dtype=np.int64)
        self._head = np.zeros(self.num_classes, dtype=np.int64)  # next write slot

    @classmethod
    def create(
        cls,
        num_classes: int,
        total_capacity: int,
        dim: int,
        init_mode: str = "random-unit",
        seed: int | None = 0,
    ) -> "LesionQueue":
        """Split ``total_capacity`` evenly across classes (floor) and initialize."""
        if num_classes < 1 or dim < 1:
            raise InvalidConfigError("num_classes and dim must be positive")
        if total_capacity < num_classes:
            raise InvalidConfigError(
                f"total capacity {total_capacity} smaller than number of classes {num_classes}"
            )
        per_class = total_capacity // num_classes
        if per_class * num_classes != total_capacity:
            log.info(
                "queue capacity %d not divisible by %d classes; using %d per class, %d slots unused",
                total_capacity, num_classes, per_class, total_capacity - per_class * num_classes,
            )
        q = cls(num_classes, per_class, dim)
        if init_mode == "random-unit":
            rng = np.random.default_rng(seed)
            keys = rng.standard_normal((num_classes, per_class, dim))
            q._buf[:] = keys / np.linalg.norm(keys, axis=-1, keepdims=True)
            q._len[:] = per_class
        elif init_mode != "empty":
            raise InvalidConfigError(f"unknown init_mode {init_mode!r}")
        return q

    @property
    def lengths(self) -> np.ndarray:
        return self._len.copy()

    @property
    def total(self) -> int:
        return int(self._len.sum())

    def _check_class(self, y) -> int:
        if int(y) != y or not 0 <= y < self.num_classes:
            raise InvalidClassError(f"class {y} outside [0, {self.num_classes})")
        return int(y)

    def enqueue(self, y: int, keys) -> None:
        """Append keys to class ``y`` in order, evicting the oldest on overflow."""
        y = self._check_class(y)
        keys = np.asarray(keys, dtype=np.float64).reshape(-1, self.dim) if np.size(keys) else np.empty((0, self.dim))
        if len(keys) == 0:
            return
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise NormalizationError("queue keys must have unit L2 norm")
        M = self.capacity
        if len(keys) > M:
            # Only the last M survive; advance the head as if all were written.
            skipped = len(keys) - M
            self._head[y] = (self._head[y] + skipped) % M
            keys = keys[skipped:]
        n = len(keys)
        idx = (self._head[y] + np.arange(n)) % M
        self._buf[y, idx] = keys
        self._head[y] = (self._head[y] + n) % M
        self._len[y] = min(M, self._len[y] + n)

    def class_keys(self, y: int) -> np.ndarray:
        """Keys of class ``y`` oldest first (a copy)."""
        y = self._check_class(y)
        n, M = int(self._len[y]), self.capacity
        start = (self._head[y] - n) % M
        return self._buf[y, (start + np.arange(n)) % M].copy()

    def snapshot_all(self) -> list[np.ndarray]:
        return [self.class_keys(y) for y in range(self.num_classes)]

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """All stored keys as ``(class_tags, keys)``, ascending class then age."""
        snap = self.snapshot_all()
        tags = np.concatenate([np.full(len(k), y, dtype=np.int64) for y, k in enumerate(snap)])
        return tags, np.concatenate(snap, axis=0) if snap else np.empty((0, self.dim))

    def negatives_for(self, pseudo_label: int) -> tuple[np.ndarray, np.ndarray]:
        """Every stored key from classes other than ``pseudo_label``, tagged."""
        y = self._check_class(pseudo_label)
        tags, keys = self.flat()
        keep = tags != y
        return tags[keep], keys[keep]

    # Raw state access for checkpointing.
    def state_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self._buf.copy(), self._len.copy(), self._head.copy()

    @classmethod
    def from_state(cls, buf, lengths, heads) -> "LesionQueue":
        buf = np.asarray(buf, dtype=np.float64)
        q = cls(*buf.shape)
        q._buf[:] = buf
        q._len[:] = lengths
        q._head[:] = heads
        return q

    def copy(self) -> "LesionQueue":
        return LesionQueue.from_state(*self.state_arrays())

    def __repr__(self) -> str:
        return f"LesionQueue(K={self.num_classes}, M={self.capacity}, dim={self.dim}, fill={self._len.tolist()})"
