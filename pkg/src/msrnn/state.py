"""Bounded multi-state storage and the retention event trace.

The multi-state is the recurrent state of the decoder: per layer and head an
ordered list of cached key/value rows plus metadata. Policies shrink it by
evicting entries; every append and evict lands in a RetentionTrace that the
analysis tools consume.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

ACTION_APPEND = "append"
ACTION_EVICT = "evict"

GROWTH_UNBOUNDED = "unbounded"
GROWTH_BOUNDED = "min(t,k)"

TRACE_COLUMNS = ("step", "layer", "head", "action", "original_position", "token_id")


@dataclass(frozen=True)
class StateMeta:
    """Metadata carried by one cached state entry."""

    original_position: int
    entry_step: int
    token_id: int

    def __post_init__(self) -> None:
        if self.original_position < 0 or self.entry_step < 0:
            raise ValueError("original_position and entry_step must be non-negative")
        if self.original_position > self.entry_step:
            raise ValueError(
                f"original_position {self.original_position} exceeds entry_step {self.entry_step}"
            )


@dataclass(frozen=True)
class TraceEvent:
    step: int
    layer: int
    head: int
    action: str
    original_position: int
    token_id: int


def _event_sort_key(ev: TraceEvent) -> tuple:
    # appends before evicts within a step so replay never removes a missing entry
    return (ev.step, ev.layer, ev.head, 0 if ev.action == ACTION_APPEND else 1, ev.original_position)


class RetentionTrace:
    """Append/evict event log over a full decoding run.

    Events are kept in insertion order; `sorted_events` puts them in the
    canonical (step, layer, head, append-before-evict, position) order used
    for file output and cross-run comparison.
    """

    def __init__(self, n_layers: int, n_heads: int):
        if n_layers < 1 or n_heads < 1:
            raise ValueError("n_layers and n_heads must be >= 1")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.events: list[TraceEvent] = []

    def record(self, step: int, layer: int, head: int, action: str,
               original_position: int, token_id: int) -> None:
        if action not in (ACTION_APPEND, ACTION_EVICT):
            raise ValueError(f"unknown trace action {action!r}")
        if not (0 <= layer < self.n_layers and 0 <= head < self.n_heads):
            raise ValueError(f"layer/head ({layer}, {head}) out of range")
        self.events.append(TraceEvent(step, layer, head, action, original_position, token_id))

    @property
    def n_steps(self) -> int:
        if not self.events:
            return 0
        return max(ev.step for ev in self.events) + 1

    def sorted_events(self) -> list[TraceEvent]:
        return sorted(self.events, key=_event_sort_key)

    def retained_sets(self, layer: int, head: int) -> list[set[int]]:
        """Post-step retained original positions for one (layer, head).

        Element t is the set right after step t's appends and evictions.
        """
        per_step: dict[int, list[TraceEvent]] = {}
        for ev in self.events:
            if ev.layer == layer and ev.head == head:
                per_step.setdefault(ev.step, []).append(ev)
        snapshots: list[set[int]] = []
        alive: set[int] = set()
        for t in range(self.n_steps):
            for ev in sorted(per_step.get(t, []), key=_event_sort_key):
                if ev.action == ACTION_APPEND:
                    alive.add(ev.original_position)
                else:
                    alive.discard(ev.original_position)
            snapshots.append(set(alive))
        return snapshots

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_COLUMNS)
            for ev in self.sorted_events():
                writer.writerow([ev.step, ev.layer, ev.head, ev.action,
                                 ev.original_position, ev.token_id])

    @classmethod
    def read_csv(cls, path: str) -> "RetentionTrace":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != list(TRACE_COLUMNS):
                raise ValueError(f"bad retention trace header in {path}: {header}")
            rows = [row for row in reader if row]
        if not rows:
            raise ValueError(f"retention trace {path} holds no events")
        n_layers = max(int(r[1]) for r in rows) + 1
        n_heads = max(int(r[2]) for r in rows) + 1
        trace = cls(n_layers, n_heads)
        for r in rows:
            trace.record(int(r[0]), int(r[1]), int(r[2]), r[3], int(r[4]), int(r[5]))
        return trace


class _HeadState:
    """Contiguous K/V rows plus aligned metadata for one (layer, head)."""

    def __init__(self, head_dim: int):
        self.keys = np.zeros((0, head_dim), dtype=np.float32)
        self.values = np.zeros((0, head_dim), dtype=np.float32)
        self.metas: list[StateMeta] = []


class MultiState:
    """Per-layer, per-head ordered multi-state of cached K/V rows.

    `capacity=None` gives the unbounded g(t)=t cache; an integer k gives the
    bounded g(t)=min(t,k) regime, where callers append first and policies
    evict afterwards (lists may hold k+1 entries transiently within a step).
    Appending and evicting never reorders the surviving entries.
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int,
                 capacity: int | None = None, trace: RetentionTrace | None = None):
        if n_layers < 1 or n_heads < 1:
            raise ValueError("n_layers and n_heads must be >= 1")
        if head_dim < 0:
            raise ValueError("head_dim must be >= 0")
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1 when bounded")
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.capacity = capacity
        self.trace = trace
        self._heads = [[_HeadState(head_dim) for _ in range(n_heads)] for _ in range(n_layers)]
        self._last_step = -1

    @property
    def growth_tag(self) -> str:
        return GROWTH_UNBOUNDED if self.capacity is None else GROWTH_BOUNDED

    def _head(self, layer: int, head: int) -> _HeadState:
        if not (0 <= layer < self.n_layers and 0 <= head < self.n_heads):
            raise ValueError(f"layer/head ({layer}, {head}) out of range")
        return self._heads[layer][head]

    def size(self, layer: int, head: int) -> int:
        return len(self._head(layer, head).metas)

    def append(self, layer: int, head: int, key: np.ndarray, value: np.ndarray,
               meta: StateMeta) -> None:
        hs = self._head(layer, head)
        key = np.asarray(key, dtype=np.float32)
        value = np.asarray(value, dtype=np.float32)
        if key.shape != (self.head_dim,) or value.shape != (self.head_dim,):
            raise ValueError(
                f"key/value rows must have shape ({self.head_dim},), "
                f"got {key.shape} and {value.shape}"
            )
        if hs.metas and meta.original_position <= hs.metas[-1].original_position:
            raise ValueError(
                f"original_position {meta.original_position} not greater than current "
                f"maximum {hs.metas[-1].original_position}"
            )
        hs.keys = np.concatenate([hs.keys, key[None, :]])
        hs.values = np.concatenate([hs.values, value[None, :]])
        hs.metas.append(meta)
        self._last_step = max(self._last_step, meta.entry_step)
        if self.trace is not None:
            self.trace.record(meta.entry_step, layer, head, ACTION_APPEND,
                              meta.original_position, meta.token_id)

    def evict(self, layer: int, head: int, index: int) -> StateMeta:
        hs = self._head(layer, head)
        if not (0 <= index < len(hs.metas)):
            raise ValueError(f"evict index {index} out of range for size {len(hs.metas)}")
        meta = hs.metas.pop(index)
        hs.keys = np.delete(hs.keys, index, axis=0)
        hs.values = np.delete(hs.values, index, axis=0)
        if self.trace is not None:
            self.trace.record(self._last_step, layer, head, ACTION_EVICT,
                              meta.original_position, meta.token_id)
        return meta

    def keys(self, layer: int, head: int) -> np.ndarray:
        return self._head(layer, head).keys

    def values(self, layer: int, head: int) -> np.ndarray:
        return self._head(layer, head).values

    def metas(self, layer: int, head: int) -> list[StateMeta]:
        return list(self._head(layer, head).metas)

    def retained_positions(self, layer: int, head: int) -> list[int]:
        """Original positions currently cached, in list order (strictly increasing)."""
        return [m.original_position for m in self._head(layer, head).metas]
