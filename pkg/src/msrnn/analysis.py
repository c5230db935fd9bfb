"""Retention analyses over trace event logs, plus the cache memory model.

Everything here replays RetentionTrace events; nothing touches model math.
Retention matrices mirror the kept/dropped figures (rows = steps, columns =
original positions), lifetimes measure how long positions survive, tag tables
aggregate lifetimes per part-of-speech-style labels, and the memory report is
the closed-form multi-state footprint.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .state import RetentionTrace

UNKNOWN_TAG = "UNK"
AVERAGE_ROW = "Avg."
GIGABYTE = 1e9


def retention_matrix(trace: RetentionTrace, layer: int,
                     head: int | None = None) -> np.ndarray:
    """Steps-by-positions retention matrix for one layer.

    Cell (t, p) is 1.0 when position p is retained after step t's events.
    With `head=None` the matrix is the mean over heads (fractional cells for
    head-wise policies). Strictly lower-triangular-plus-diagonal: nothing is
    retained before it appears.
    """
    if not (0 <= layer < trace.n_layers):
        raise ValueError(f"layer {layer} out of range for {trace.n_layers}")
    steps = trace.n_steps
    if steps == 0:
        raise ValueError("trace holds no events")
    heads = range(trace.n_heads) if head is None else [head]
    matrix = np.zeros((steps, steps), dtype=np.float64)
    for h in heads:
        if not (0 <= h < trace.n_heads):
            raise ValueError(f"head {h} out of range for {trace.n_heads}")
        for t, retained in enumerate(trace.retained_sets(layer, h)):
            for p in retained:
                matrix[t, p] += 1.0
    matrix /= len(list(heads))
    return matrix


def write_matrix_csv(matrix: np.ndarray, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [str(p) for p in range(matrix.shape[1])])
        for t in range(matrix.shape[0]):
            writer.writerow([t] + [f"{v:.6g}" for v in matrix[t]])


def write_matrix_pgm(matrix: np.ndarray, path: str) -> None:
    """Binary PGM, one byte per cell: 255 = always retained, 0 = never."""
    cells = np.clip(np.rint(matrix * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{cells.shape[1]} {cells.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(cells.tobytes())


def token_lifetime(trace: RetentionTrace) -> dict[int, float]:
    """Mean steps retained per original position, averaged over layers and heads.

    Lifetime of one appearance is eviction_step - entry_step, or n_steps -
    entry_step when never evicted.
    """
    steps = trace.n_steps
    if steps == 0:
        raise ValueError("trace holds no events")
    totals: dict[int, float] = {}
    counts: dict[int, int] = {}
    entry: dict[tuple[int, int, int], int] = {}
    for ev in trace.sorted_events():
        key = (ev.layer, ev.head, ev.original_position)
        if ev.action == "append":
            entry[key] = ev.step
        else:
            started = entry.pop(key, None)
            if started is None:
                raise ValueError(f"evict without matching append: {ev}")
            totals[ev.original_position] = totals.get(ev.original_position, 0.0) \
                + (ev.step - started)
            counts[ev.original_position] = counts.get(ev.original_position, 0) + 1
    for (_layer, _head, position), started in entry.items():
        totals[position] = totals.get(position, 0.0) + (steps - started)
        counts[position] = counts.get(position, 0) + 1
    return {p: totals[p] / counts[p] for p in sorted(totals)}


def read_tag_file(path: str) -> dict[int, str]:
    """Tab-separated position/tag pairs; positions must be unique."""
    tags: dict[int, str] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'position<TAB>tag'")
            try:
                position = int(parts[0])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad position {parts[0]!r}") from None
            if position in tags:
                raise ValueError(f"{path}:{lineno}: duplicate position {position}")
            tags[position] = parts[1]
    return tags


def lifetime_by_tag(trace: RetentionTrace,
                    tags: dict[int, str]) -> list[tuple[str, float]]:
    """Mean lifetime per tag, sorted descending, with a leading global-average row.

    Positions missing from the tag map fall into the UNK bucket.
    """
    lifetimes = token_lifetime(trace)
    buckets: dict[str, list[float]] = {}
    for position, life in lifetimes.items():
        buckets.setdefault(tags.get(position, UNKNOWN_TAG), []).append(life)
    rows = [(tag, sum(vals) / len(vals)) for tag, vals in buckets.items()]
    rows.sort(key=lambda r: (-r[1], r[0]))
    overall = sum(lifetimes.values()) / len(lifetimes)
    return [(AVERAGE_ROW, overall)] + rows


def recent_proportion(trace: RetentionTrace, k: int, exclude_prefix: int = 0) -> float:
    """Fraction of retained states that are recent (original_position > t - k).

    Counted over every step, layer, and head after that step's evictions.
    `exclude_prefix` drops positions below it from the count, which makes the
    pinned-prefix window variants comparable to plain windows.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    steps = trace.n_steps
    if steps == 0:
        raise ValueError("trace holds no events")
    recent = 0
    total = 0
    for layer in range(trace.n_layers):
        for head in range(trace.n_heads):
            for t, retained in enumerate(trace.retained_sets(layer, head)):
                for p in retained:
                    if p < exclude_prefix:
                        continue
                    total += 1
                    if p > t - k:
                        recent += 1
    if total == 0:
        raise ValueError("trace retains nothing outside the excluded prefix")
    return recent / total


@dataclass(frozen=True)
class MemoryReport:
    """Closed-form multi-state footprint: K and V rows for every layer and head."""

    n_layers: int
    n_heads: int
    head_dim: int
    state_size: int
    bytes_per_element: int
    total_bytes: int
    gigabytes: float
    max_batch: int | None

    @property
    def fields(self) -> tuple:
        return (self.state_size, self.total_bytes, self.gigabytes, self.max_batch)


def memory_report(n_layers: int, n_heads: int, head_dim: int, state_size: int,
                  bytes_per_element: int, budget_bytes: int | None = None) -> MemoryReport:
    """bytes = 2 * n_layers * n_heads * head_dim * state_size * bytes_per_element.

    Exactly linear in every factor, so state_size 0 is a valid empty cache
    costing 0 bytes; `max_batch` is how many such states fit in the budget
    (undefined for an empty cache).
    """
    for name, value in (("n_layers", n_layers), ("n_heads", n_heads),
                        ("head_dim", head_dim),
                        ("bytes_per_element", bytes_per_element)):
        if value < 1:
            raise ValueError(f"{name} must be >= 1")
    if state_size < 0:
        raise ValueError("state_size must be >= 0")
    total = 2 * n_layers * n_heads * head_dim * state_size * bytes_per_element
    max_batch = None
    if budget_bytes is not None:
        if budget_bytes < 0:
            raise ValueError("budget_bytes must be >= 0")
        max_batch = budget_bytes // total if total > 0 else None
    return MemoryReport(n_layers=n_layers, n_heads=n_heads, head_dim=head_dim,
                        state_size=state_size, bytes_per_element=bytes_per_element,
                        total_bytes=total, gigabytes=total / GIGABYTE,
                        max_batch=max_batch)


def write_memory_csv(reports: list[MemoryReport], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["state_size", "bytes", "gigabytes", "max_batch"])
        for r in reports:
            batch = "" if r.max_batch is None else str(r.max_batch)
            writer.writerow([r.state_size, r.total_bytes, f"{r.gigabytes:.6g}", batch])
