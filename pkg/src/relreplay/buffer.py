"""Reservoir rehearsal buffer with capacity held constant for the whole run.

Every stored sample keeps the classifier logits it had when it entered the
buffer; those are the distillation targets, frozen by default. Insertion
randomness comes from the buffer's own generator so training-side draws never
shift the reservoir stream.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyBufferError, FormatError
from .mainnet import MainNet, predict
from .tensor import Array


@dataclass
class BufferEntry:
    x: Array
    y: int
    logits: Array
    task_id: int


class ReservoirBuffer:
    """Classic algorithm-R reservoir over a stream of labelled samples.

    After N inserts into capacity M, each stream item is retained with
    probability min(1, M/N) regardless of arrival order.
    """

    def __init__(self, capacity: int, seed) -> None:
        if capacity < 0:
            raise ConfigError("buffer capacity must be >= 0")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.entries: list[BufferEntry] = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def insert(self, entry: BufferEntry) -> None:
        """Offer one sample to the reservoir; draws exactly one random slot once full."""
        if self.capacity == 0:
            self.seen += 1
            return
        if self.seen < self.capacity:
            self.entries.append(entry)
        else:
            j = int(self.rng.integers(0, self.seen + 1))
            if j < self.capacity:
                self.entries[j] = entry
        self.seen += 1

    def insert_sample(self, x: Array, y: int, logits: Array, task_id: int) -> None:
        self.insert(BufferEntry(np.array(x, dtype=np.float64), int(y), np.array(logits, dtype=np.float64), int(task_id)))

    def sample_indices(self, batch_size: int, rng: np.random.Generator, pool: Array | None = None) -> Array:
        """Draw batch_size entry indices.

        Uses sampling without replacement once the pool holds at least
        batch_size entries, with replacement below that. `pool` restricts the
        draw to a subset of indices (see split_partition).

        Returns:
            int64 index array of length batch_size.
        """
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.entries:
            raise EmptyBufferError("cannot sample from an empty buffer")
        if pool is None:
            pool = np.arange(len(self.entries), dtype=np.int64)
        else:
            pool = np.asarray(pool, dtype=np.int64)
            pool = pool[pool < len(self.entries)]
            if pool.size == 0:
                raise EmptyBufferError("index pool holds no live entries")
        replace = pool.size < batch_size
        return pool[rng.choice(pool.size, size=batch_size, replace=replace)]

    def gather(self, indices: Array) -> tuple[Array, Array, Array, Array]:
        """Stack the chosen entries into (features, labels, stored logits, task ids)."""
        rows = [self.entries[int(i)] for i in indices]
        x = np.stack([r.x for r in rows])
        y = np.array([r.y for r in rows], dtype=np.int64)
        logits = np.stack([r.logits for r in rows])
        tasks = np.array([r.task_id for r in rows], dtype=np.int64)
        return x, y, logits, tasks

    def refresh_logits(self, net: MainNet) -> None:
        """Debug path: recompute every stored logit vector under the current net."""
        if not self.entries:
            return
        x = np.stack([e.x for e in self.entries])
        logits = predict(net, x).logits
        for entry, row in zip(self.entries, logits):
            entry.logits = row.copy()

    def split_partition(self, outer_fraction: float, rng: np.random.Generator) -> tuple[Array, Array]:
        """Disjoint (inner, outer) index views covering the current entries.

        The outer share gets round(outer_fraction * n) entries; both sides must
        end up non-empty.
        """
        if not 0.0 < outer_fraction < 1.0:
            raise ConfigError("outer_fraction must lie strictly inside (0, 1)")
        n = len(self.entries)
        n_outer = int(round(outer_fraction * n))
        if n_outer == 0 or n_outer == n:
            raise ConfigError(f"partition of {n} entries at {outer_fraction} leaves one side empty")
        perm = rng.permutation(n).astype(np.int64)
        return np.sort(perm[n_outer:]), np.sort(perm[:n_outer])

    def dump(self, path) -> None:
        """Write entries as fixed-width little-endian records.

        Record layout: u32 task_id, u32 label, feature float64s, logit float64s.
        """
        with open(path, "wb") as fh:
            for e in self.entries:
                fh.write(struct.pack("<II", e.task_id, e.y))
                fh.write(np.ascontiguousarray(e.x, dtype="<f8").tobytes())
                fh.write(np.ascontiguousarray(e.logits, dtype="<f8").tobytes())


def load_entries(path, feature_dim: int, n_slots: int) -> list[BufferEntry]:
    """Read a buffer dump written by ReservoirBuffer.dump."""
    if feature_dim < 1 or n_slots < 1:
        raise ConfigError("feature_dim and n_slots must be >= 1")
    rec = 8 + 8 * (feature_dim + n_slots)
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % rec != 0:
        raise FormatError(f"file size {len(blob)} is not a multiple of record size {rec}")
    out = []
    for off in range(0, len(blob), rec):
        task_id, label = struct.unpack_from("<II", blob, off)
        x = np.frombuffer(blob, dtype="<f8", count=feature_dim, offset=off + 8).astype(np.float64)
        logits = np.frombuffer(
            blob, dtype="<f8", count=n_slots, offset=off + 8 + 8 * feature_dim
        ).astype(np.float64)
        out.append(BufferEntry(x, int(label), logits, int(task_id)))
    return out
