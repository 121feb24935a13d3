"""Bounded inter-stage replay buffer.

Writes overwrite the oldest record once the buffer is full. Reads never
evict; they pick, among the least-reused records, the newest one (LIFO with
precedence for least reuse) and bump its reuse count. Safe for one writer
(stage j) and one reader (stage j+1); the deterministic simulation uses it
single-threaded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyBufferError, ShapeError, ValidationError


@dataclass
class BufferRecord:
    activation: np.ndarray
    labels: np.ndarray
    reuse_count: int
    insertion_seq: int


@dataclass(frozen=True)
class BufferStats:
    occupancy: int
    reuse_min: int | None
    reuse_max: int | None
    reuse_mean: float | None
    staleness: float | None


def _frozen_copy(arr, dtype=None):
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


class ReplayBuffer:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValidationError(f"buffer capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._records: list[BufferRecord] = []
        self._next_seq = 0
        self._act_shape = None
        self._label_shape = None

    def __len__(self):
        return len(self._records)

    def write(self, activation, labels) -> None:
        act = _frozen_copy(activation, np.float64)
        lab = _frozen_copy(labels)
        if self._act_shape is None:
            self._act_shape, self._label_shape = act.shape, lab.shape
        elif act.shape != self._act_shape or lab.shape != self._label_shape:
            raise ShapeError(
                f"buffer write shape drift: got {act.shape}/{lab.shape}, "
                f"buffer holds {self._act_shape}/{self._label_shape}")
        if len(self._records) == self.capacity:
            oldest = min(range(len(self._records)),
                         key=lambda i: self._records[i].insertion_seq)
            del self._records[oldest]
        self._records.append(BufferRecord(act, lab, 0, self._next_seq))
        self._next_seq += 1

    def read(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._records:
            raise EmptyBufferError("read from empty replay buffer")
        least = min(r.reuse_count for r in self._records)
        rec = max((r for r in self._records if r.reuse_count == least),
                  key=lambda r: r.insertion_seq)
        rec.reuse_count += 1
        return rec.activation, rec.labels

    def records(self) -> list[BufferRecord]:
        """Snapshot ordered by insertion (oldest first); for diagnostics."""
        return sorted(self._records, key=lambda r: r.insertion_seq)

    def stats(self) -> BufferStats:
        if not self._records:
            return BufferStats(0, None, None, None, None)
        counts = [r.reuse_count for r in self._records]
        seqs = [r.insertion_seq for r in self._records]
        return BufferStats(
            occupancy=len(self._records),
            reuse_min=min(counts),
            reuse_max=max(counts),
            reuse_mean=sum(counts) / len(counts),
            staleness=self._next_seq - sum(seqs) / len(seqs),
        )
