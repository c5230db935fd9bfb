"""Evaluation harness: sequential decoding, masked-parallel evaluation,
scripted policy simulation, and greedy generation.

Sequential mode is the ground truth: one decode_step per token against an
explicit multi-state, policy applied after each step. Masked-parallel mode
pushes a whole chunk through each layer at once and emulates the same
evictions with attention masks: static band+prefix masks for the window
family, masks grown row-by-row from the attention weights for H2O/TOVA.
Both modes share every numeric helper, so probabilities, decisions, and
perplexities agree exactly; the acceptance tolerance is slack on top.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import (AttentionRow, Model, _inv_freq, attention_step, decode_step,
                    rms_norm, rotate, silu, stacked_positions)
from .policies import (AccumulatedScores, PolicyKind, accumulate_row, apply_policy,
                       decide_layer)
from .remap import remap_positions
from .state import (ACTION_APPEND, ACTION_EVICT, MultiState, RetentionTrace,
                    StateMeta)

SCRIPT_COLUMNS = ("step", "layer", "head", "state_slot", "probability")
ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class TokenStream:
    """Token ids plus the chunk length used for independent-chunk scoring."""

    ids: tuple[int, ...]
    chunk_len: int

    def __post_init__(self) -> None:
        if self.chunk_len < 2:
            raise ValueError("chunk_len must be >= 2 (each chunk needs a prediction)")
        if len(self.ids) < 2:
            raise ValueError("token stream must hold at least 2 tokens")
        if any(t < 0 for t in self.ids):
            raise ValueError("token ids must be non-negative")

    def chunks(self) -> list[tuple[int, tuple[int, ...]]]:
        """(start offset, ids) per chunk; a trailing chunk of 1 is dropped."""
        out = []
        for start in range(0, len(self.ids), self.chunk_len):
            part = self.ids[start:start + self.chunk_len]
            if len(part) >= 2:
                out.append((start, part))
        return out


def read_token_stream(path: str, chunk_len: int, vocab_size: int | None = None) -> TokenStream:
    """One decimal token id per line."""
    ids = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                tok = int(line)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not a token id: {line!r}") from None
            if tok < 0 or (vocab_size is not None and tok >= vocab_size):
                raise ValueError(f"{path}:{lineno}: token {tok} out of range")
            ids.append(tok)
    return TokenStream(ids=tuple(ids), chunk_len=chunk_len)


def write_token_stream(path: str, ids: Sequence[int]) -> None:
    with open(path, "w") as fh:
        for tok in ids:
            fh.write(f"{tok}\n")


@dataclass(frozen=True)
class ChunkResult:
    start: int
    n_scored: int
    nll: float


@dataclass(frozen=True)
class PerplexityReport:
    chunks: tuple[ChunkResult, ...]

    @property
    def total_nll(self) -> float:
        return float(sum(c.nll for c in self.chunks))

    @property
    def token_count(self) -> int:
        return int(sum(c.n_scored for c in self.chunks))

    @property
    def perplexity(self) -> float:
        return float(math.exp(self.total_nll / self.token_count))


def nll_of(logits: np.ndarray, target: int) -> float:
    """Stable -log softmax(logits)[target] in float64."""
    x = logits.astype(np.float64)
    m = float(x.max())
    return (m + math.log(float(np.exp(x - m).sum()))) - float(x[target])


def _validate_chunk_len(model: Model, chunk_len: int, remap: bool) -> None:
    if not remap and chunk_len > model.config.train_context_len:
        raise ValueError(
            f"chunk_len {chunk_len} exceeds train_context_len "
            f"{model.config.train_context_len}; enable remapping to go longer"
        )


def _remap_fn(retained: Sequence[int]) -> np.ndarray:
    return remap_positions(retained)


def _decode_chunk_sequential(model: Model, ids: Sequence[int], kind: PolicyKind | None,
                             remap: bool, trace: RetentionTrace | None) -> float:
    config = model.config
    state = MultiState(config.n_layers, config.n_heads, config.head_dim,
                       capacity=kind.k if kind else None, trace=trace)
    acc = AccumulatedScores(config.n_layers, config.n_heads) \
        if kind is not None and kind.needs_scores else None
    position_fn = _remap_fn if remap else None
    total = 0.0
    for t, token in enumerate(ids):
        logits, rows = decode_step(model, state, token, t, position_fn)
        if t + 1 < len(ids):
            total += nll_of(logits, ids[t + 1])
        if kind is not None:
            apply_policy(kind, state, rows, acc)
    return total


def sequential_perplexity(model: Model, stream: TokenStream,
                          kind: PolicyKind | None = None, *, remap: bool = False,
                          trace: RetentionTrace | None = None,
                          threads: int = 1) -> PerplexityReport:
    """Token-by-token perplexity under a policy (None = unbounded topline).

    Chunks are independent: the state resets between them and the first token
    of each chunk is never scored. A provided trace captures the first chunk
    only (steps are chunk-local).
    """
    _validate_stream(model, stream)
    _validate_chunk_len(model, stream.chunk_len, remap)
    parts = stream.chunks()

    def run(one) -> ChunkResult:
        index, (start, ids) = one
        chunk_trace = trace if (index == 0 and trace is not None) else None
        nll = _decode_chunk_sequential(model, ids, kind, remap, chunk_trace)
        return ChunkResult(start=start, n_scored=len(ids) - 1, nll=nll)

    results = _map_ordered(run, list(enumerate(parts)), threads)
    return PerplexityReport(chunks=tuple(results))


def _validate_stream(model: Model, stream: TokenStream) -> None:
    vocab = model.config.vocab_size
    for i, tok in enumerate(stream.ids):
        if tok >= vocab:
            raise ValueError(f"stream token {tok} at index {i} out of range for vocab {vocab}")


def _map_ordered(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# masked-parallel evaluation


def _window_visible(t: int, k: int, pin: int) -> list[int]:
    """Columns row t attends to under the static band+prefix mask.

    Matches sequential FIFO exactly: the k states retained after step t-1
    plus the fresh token itself (k+1 columns once saturated).
    """
    if t < k + 1:
        return list(range(t + 1))
    band_lo = t - (k - pin)
    return list(range(pin)) + list(range(band_lo, t + 1))


def _decode_chunk_parallel(model: Model, ids: Sequence[int], kind: PolicyKind,
                           trace: RetentionTrace | None) -> float:
    config, w = model
    n_heads, head_dim = config.n_heads, config.head_dim
    inv_freq = _inv_freq(head_dim, config.rope_base)
    T = len(ids)
    positions = np.arange(T, dtype=np.float64)
    x = w.token_embedding[list(ids)].copy()
    window_family = kind.family == "window"

    for layer, lw in enumerate(w.layers):
        # row-wise projections: same gemv shapes as sequential decoding
        q = np.empty((T, config.hidden_dim), dtype=np.float32)
        k_proj = np.empty_like(q)
        v_proj = np.empty_like(q)
        for t in range(T):
            h = rms_norm(x[t], lw.attn_norm)
            q[t] = h @ lw.w_q
            k_proj[t] = h @ lw.w_k
            v_proj[t] = h @ lw.w_v
        qh = np.ascontiguousarray(q.reshape(T, n_heads, head_dim).transpose(1, 0, 2))
        kh = np.ascontiguousarray(k_proj.reshape(T, n_heads, head_dim).transpose(1, 0, 2))
        vh = np.ascontiguousarray(v_proj.reshape(T, n_heads, head_dim).transpose(1, 0, 2))
        k_rot = rotate(kh, np.broadcast_to(positions, (n_heads, T)), inv_freq)
        q_rot = rotate(qh, np.broadcast_to(positions, (n_heads, T)), inv_freq)

        retained: list[list[int]] = [[] for _ in range(n_heads)]
        acc: list[np.ndarray] = [np.zeros(0, dtype=np.float64) for _ in range(n_heads)]
        attn_out = np.empty((T, config.hidden_dim), dtype=np.float32)
        for t in range(T):
            if window_family:
                visible = [_window_visible(t, kind.k, kind.pin)] * n_heads
            else:
                visible = [retained[h] + [t] for h in range(n_heads)]
            if trace is not None:
                for head in range(n_heads):
                    trace.record(t, layer, head, ACTION_APPEND, t, ids[t])
            idx = [np.asarray(visible[h], dtype=np.intp) for h in range(n_heads)]
            keys_g = np.stack([k_rot[h][idx[h]] for h in range(n_heads)])
            vals_g = np.stack([vh[h][idx[h]] for h in range(n_heads)])
            q_t = np.ascontiguousarray(q_rot[:, t, :])
            ctx, row = attention_step(q_t, keys_g, vals_g, lw.w_o)
            attn_out[t] = ctx

            if window_family:
                if len(visible[0]) == kind.k + 1:
                    evicted = visible[0][kind.pin]
                    if trace is not None:
                        for head in range(n_heads):
                            trace.record(t, layer, head, ACTION_EVICT, evicted, ids[evicted])
            else:
                if kind.needs_scores:
                    for h in range(n_heads):
                        acc[h] = accumulate_row(acc[h], row.probs[h])
                size = len(visible[0])
                acc_l = np.stack(acc) if kind.needs_scores else None
                per_head = decide_layer(kind, size, n_heads, row.probs, acc_l)
                for h in range(n_heads):
                    new = visible[h]
                    drop = per_head[h]
                    if drop is not None:
                        evicted = new[drop]
                        new = new[:drop] + new[drop + 1:]
                        if kind.needs_scores:
                            acc[h] = np.delete(acc[h], drop)
                        if trace is not None:
                            trace.record(t, layer, h, ACTION_EVICT, evicted, ids[evicted])
                    retained[h] = new

        for t in range(T):
            xt = x[t] + attn_out[t]
            x[t] = xt + silu(rms_norm(xt, lw.ff_norm) @ lw.ff_in) @ lw.ff_out

    total = 0.0
    for t in range(T - 1):
        total += nll_of(x[t] @ w.lm_head, ids[t + 1])
    return total


def masked_parallel_perplexity(model: Model, stream: TokenStream, kind: PolicyKind,
                               *, trace: RetentionTrace | None = None,
                               threads: int = 1) -> PerplexityReport:
    """One-pass per-chunk evaluation that emulates sequential eviction with masks.

    Window/WindowPin use the closed-form band+prefix mask; H2O and TOVA grow
    their masks row by row from the layer's own attention weights. Positions
    stay original (no remapping in this mode).
    """
    if kind is None:
        raise ValueError("masked-parallel evaluation needs a policy; "
                         "use sequential_perplexity for the unbounded topline")
    _validate_stream(model, stream)
    _validate_chunk_len(model, stream.chunk_len, remap=False)
    parts = stream.chunks()

    def run(one) -> ChunkResult:
        index, (start, ids) = one
        chunk_trace = trace if (index == 0 and trace is not None) else None
        nll = _decode_chunk_parallel(model, ids, kind, chunk_trace)
        return ChunkResult(start=start, n_scored=len(ids) - 1, nll=nll)

    results = _map_ordered(run, list(enumerate(parts)), threads)
    return PerplexityReport(chunks=tuple(results))


# ---------------------------------------------------------------------------
# scripted traces: policy dynamics without model math

RowRule = Callable[[int, int, int, Sequence[int]], np.ndarray]


@dataclass
class ScriptedTrace:
    """Per-step, per-layer, per-head probability rows over the retained states."""

    n_layers: int
    n_heads: int
    rows: list[list[list[np.ndarray]]]  # [step][layer][head] -> (size,) float32

    @property
    def n_steps(self) -> int:
        return len(self.rows)

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SCRIPT_COLUMNS)
            for t, per_layer in enumerate(self.rows):
                for layer, per_head in enumerate(per_layer):
                    for head, row in enumerate(per_head):
                        for slot, p in enumerate(row):
                            writer.writerow([t, layer, head, slot, f"{float(p):.9g}"])

    @classmethod
    def read_csv(cls, path: str) -> "ScriptedTrace":
        cells: dict[tuple[int, int, int], dict[int, float]] = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != list(SCRIPT_COLUMNS):
                raise ValueError(f"bad scripted trace header in {path}: {header}")
            for row in reader:
                if not row:
                    continue
                t, layer, head, slot = (int(v) for v in row[:4])
                cells.setdefault((t, layer, head), {})[slot] = float(row[4])
        if not cells:
            raise ValueError(f"scripted trace {path} holds no rows")
        n_steps = max(key[0] for key in cells) + 1
        n_layers = max(key[1] for key in cells) + 1
        n_heads = max(key[2] for key in cells) + 1
        rows = []
        for t in range(n_steps):
            per_layer = []
            for layer in range(n_layers):
                per_head = []
                for head in range(n_heads):
                    slots = cells.get((t, layer, head))
                    if slots is None:
                        raise ValueError(f"{path}: missing row for step {t}, "
                                         f"layer {layer}, head {head}")
                    vec = np.empty(len(slots), dtype=np.float32)
                    for slot, p in slots.items():
                        if not (0 <= slot < len(slots)):
                            raise ValueError(f"{path}: state_slot {slot} out of range "
                                             f"at step {t}")
                        vec[slot] = p
                    per_head.append(vec)
                per_layer.append(per_head)
            rows.append(per_layer)
        return cls(n_layers=n_layers, n_heads=n_heads, rows=rows)


def _check_row(row: np.ndarray, size: int, where: str) -> np.ndarray:
    row = np.asarray(row, dtype=np.float32)
    if row.shape != (size,):
        raise ValueError(f"{where}: row length {row.shape} does not match "
                         f"multi-state size {size}")
    if abs(float(row.sum()) - 1.0) > ROW_SUM_TOL:
        raise ValueError(f"{where}: probabilities sum to {float(row.sum())!r}, not 1")
    return row


def _simulate(row_source: RowRule, kind: PolicyKind | None, steps: int,
              n_layers: int, n_heads: int,
              record_script: bool) -> tuple[ScriptedTrace | None, RetentionTrace]:
    trace = RetentionTrace(n_layers, n_heads)
    state = MultiState(n_layers, n_heads, head_dim=0,
                       capacity=kind.k if kind else None, trace=trace)
    acc = AccumulatedScores(n_layers, n_heads) \
        if kind is not None and kind.needs_scores else None
    empty = np.zeros(0, dtype=np.float32)
    script_rows = [] if record_script else None
    for t in range(steps):
        meta = StateMeta(original_position=t, entry_step=t, token_id=t)
        for layer in range(n_layers):
            for head in range(n_heads):
                state.append(layer, head, empty, empty, meta)
        rows = []
        step_script = []
        for layer in range(n_layers):
            size = state.size(layer, 0)
            per_head = []
            for head in range(n_heads):
                row = row_source(t, layer, head, state.retained_positions(layer, head))
                per_head.append(_check_row(row, size, f"step {t}, layer {layer}, head {head}"))
            rows.append(AttentionRow(np.stack(per_head)))
            step_script.append(per_head)
        if script_rows is not None:
            script_rows.append(step_script)
        if kind is not None:
            apply_policy(kind, state, rows, acc)
    script = None
    if script_rows is not None:
        script = ScriptedTrace(n_layers=n_layers, n_heads=n_heads, rows=script_rows)
    return script, trace


def trace_driven_simulate(script: ScriptedTrace, kind: PolicyKind | None) -> RetentionTrace:
    """Replay a scripted trace through a policy; no model math involved.

    The script must be internally consistent with the eviction sequence it
    induces: every row's length has to match the multi-state size at that
    step (appends use position = step = token id).
    """

    def from_script(t: int, layer: int, head: int, retained: Sequence[int]) -> np.ndarray:
        if t >= script.n_steps:
            raise ValueError(f"script ends at step {script.n_steps}, needed step {t}")
        return script.rows[t][layer][head]

    _, trace = _simulate(from_script, kind, script.n_steps,
                         script.n_layers, script.n_heads, record_script=False)
    return trace


def simulate_with_rule(rule: RowRule, kind: PolicyKind | None, steps: int,
                       n_layers: int = 1, n_heads: int = 1,
                       ) -> tuple[ScriptedTrace, RetentionTrace]:
    """Run a probability rule through a policy, materializing the script it made.

    The returned ScriptedTrace replays to the identical RetentionTrace via
    trace_driven_simulate (rows are recorded exactly as consumed).
    """
    script, trace = _simulate(rule, kind, steps, n_layers, n_heads, record_script=True)
    return script, trace


def uniform_rule(t: int, layer: int, head: int, retained: Sequence[int]) -> np.ndarray:
    """Uniform probability over the retained states (exact ties everywhere)."""
    n = len(retained)
    return np.full(n, 1.0 / n, dtype=np.float32)


def marker_rule(marker: int, marker_prob: float = 0.5) -> RowRule:
    """Rule giving one original position a persistent high probability.

    While the marker is retained it takes `marker_prob` and the rest share
    the remainder uniformly; once gone, the row is uniform.
    """

    def rule(t: int, layer: int, head: int, retained: Sequence[int]) -> np.ndarray:
        n = len(retained)
        if marker not in retained or n == 1:
            return np.full(n, 1.0 / n, dtype=np.float32)
        row = np.full(n, (1.0 - marker_prob) / (n - 1), dtype=np.float32)
        row[list(retained).index(marker)] = marker_prob
        return row

    return rule


# ---------------------------------------------------------------------------
# greedy generation


def generate(model: Model, prompt: Sequence[int], max_steps: int,
             kind: PolicyKind | None = None, *, remap: bool = False,
             trace: RetentionTrace | None = None) -> list[int]:
    """Feed the prompt through the policy-bounded state, then decode greedily.

    Returns prompt + generated ids (argmax at each step, lowest id on ties).
    """
    if not prompt:
        raise ValueError("prompt must hold at least one token")
    if max_steps < 0:
        raise ValueError("max_steps must be >= 0")
    config = model.config
    state = MultiState(config.n_layers, config.n_heads, config.head_dim,
                       capacity=kind.k if kind else None, trace=trace)
    acc = AccumulatedScores(config.n_layers, config.n_heads) \
        if kind is not None and kind.needs_scores else None
    position_fn = _remap_fn if remap else None
    out = list(prompt)
    logits = None
    for t, token in enumerate(out):
        logits, rows = decode_step(model, state, token, t, position_fn)
        if kind is not None:
            apply_policy(kind, state, rows, acc)
    for _ in range(max_steps):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits, rows = decode_step(model, state, nxt, len(out) - 1, position_fn)
        if kind is not None:
            apply_policy(kind, state, rows, acc)
    return out
