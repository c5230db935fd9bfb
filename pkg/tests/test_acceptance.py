"""Acceptance suite: one check per shipping requirement.

Every test prints a single PASS/FAIL line (visible with `pytest -s`) and
asserts the stated tolerance plus its runtime bound. Oracles are independent
re-derivations: pure-python argmins, closed-form retained sets, greedy
score replays, and hand-built golden tables.
"""

import math
import time

import numpy as np

from msrnn import (PolicyKind, RetentionTrace, ScriptedTrace, TokenStream,
                   lifetime_by_tag, masked_parallel_perplexity, memory_report,
                   parse_policy, recent_proportion, remap_positions,
                   retention_matrix, sequential_perplexity, simulate_with_rule,
                   token_lifetime, trace_driven_simulate, uniform_rule,
                   marker_rule)
from msrnn.cli import main
from msrnn.policies import policy_tova

from conftest import make_model, make_stream

ALL_POLICIES = ("window", "window+4", "h2o-head", "h2o-layer",
                "tova-head", "tova-layer", "tova-layer+4")


def _report(number: int, name: str, ok: bool, detail: str) -> None:
    print(f"[acceptance {number:2d}] {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"acceptance {number} {name}: {detail}"


def _toy(seed, train_context_len=64):
    return make_model(seed=seed, n_layers=4, n_heads=4, head_dim=16,
                      ff_dim=128, vocab_size=256,
                      train_context_len=train_context_len)


def test_01_full_capacity_identity():
    t0 = time.perf_counter()
    model = _toy(seed=5)
    stream = make_stream(model, length=64, chunk_len=64, seed=100)
    top = sequential_perplexity(model, stream, None)
    top_nll = top.total_nll / top.token_count
    worst = 0.0
    for name in ALL_POLICIES:
        kind = parse_policy(name, k=64)
        rep = sequential_perplexity(model, stream, kind)
        worst = max(worst, abs(rep.total_nll / rep.token_count - top_nll))
    elapsed = time.perf_counter() - t0
    _report(1, "full-capacity identity", worst <= 1e-6 and elapsed < 10.0,
            f"max per-token NLL gap {worst:.3g} over {len(ALL_POLICIES)} policies, "
            f"tol 1e-6; {elapsed:.1f}s < 10s")


def test_02_masked_parallel_equals_sequential():
    t0 = time.perf_counter()
    worst = 0.0
    traces_equal = True
    cases = 0
    for seed in range(20):
        model = _toy(seed=seed, train_context_len=128)
        stream = make_stream(model, length=128, chunk_len=128, seed=1000 + seed)
        for k in (16, 32, 64):
            for name in ALL_POLICIES:
                kind = parse_policy(name, k=k)
                t_seq = RetentionTrace(4, 4)
                t_par = RetentionTrace(4, 4)
                seq = sequential_perplexity(model, stream, kind, trace=t_seq)
                par = masked_parallel_perplexity(model, stream, kind, trace=t_par)
                worst = max(worst, abs(seq.perplexity - par.perplexity))
                if t_seq.sorted_events() != t_par.sorted_events():
                    traces_equal = False
                cases += 1
    elapsed = time.perf_counter() - t0
    _report(2, "masked-parallel equivalence",
            worst <= 1e-4 and traces_equal and elapsed < 300.0,
            f"max |dPPL| {worst:.3g} over {cases} cases, tol 1e-4; "
            f"traces {'identical' if traces_equal else 'DIVERGED'}; "
            f"{elapsed:.1f}s < 300s")


def _brute_force_argmin(values) -> int:
    best, best_val = 0, values[0]
    for i, v in enumerate(values):
        if v < best_val:
            best, best_val = i, v
    return best


def test_03_tova_eviction_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(123)
    mismatches = 0
    for _ in range(1000):
        n_heads = int(rng.integers(1, 9))
        size = int(rng.integers(2, 49))
        k = int(rng.integers(1, size + 3))
        probs = rng.random((n_heads, size))
        probs = (probs / probs.sum(axis=1, keepdims=True)).astype(np.float32)

        got = policy_tova(probs, k, headwise=True)
        if size <= k:
            expect = [None] * n_heads
        else:
            expect = [_brute_force_argmin([float(p) for p in probs[h]])
                      for h in range(n_heads)]
        if got != expect:
            mismatches += 1

        got = policy_tova(probs, k, headwise=False)
        if size <= k:
            expect = [None] * n_heads
        else:
            means = [sum(float(probs[h, i]) for h in range(n_heads)) / n_heads
                     for i in range(size)]
            expect = [_brute_force_argmin(means)] * n_heads
        if got != expect:
            mismatches += 1

        if size > k > 4:
            got = policy_tova(probs, k, headwise=False, pin=4)
            means = [sum(float(probs[h, i]) for h in range(n_heads)) / n_heads
                     for i in range(size)]
            expect = [4 + _brute_force_argmin(means[4:])] * n_heads
            if got != expect:
                mismatches += 1
    elapsed = time.perf_counter() - t0
    _report(3, "TOVA argmin oracle", mismatches == 0 and elapsed < 10.0,
            f"{mismatches} mismatches over 1000 instances "
            f"(head-, layer-wise, pinned); {elapsed:.1f}s < 10s")


def test_04_window_retained_set_closed_forms():
    t0 = time.perf_counter()
    bad = 0
    for k in (8, 32, 128):
        for pin in (0, 1, 4):
            kind = PolicyKind("window", k, pin)
            _, trace = simulate_with_rule(uniform_rule, kind, steps=513)
            sets = trace.retained_sets(0, 0)
            for t in range(513):
                if t < k:
                    expect = set(range(t + 1))
                else:
                    expect = set(range(pin)) | set(range(t - (k - pin) + 1, t + 1))
                if sets[t] != expect:
                    bad += 1
    elapsed = time.perf_counter() - t0
    _report(4, "window closed forms", bad == 0 and elapsed < 10.0,
            f"{bad} mismatching steps over 9 (k, pin) pairs x 513 steps; "
            f"{elapsed:.1f}s < 10s")


def _random_rule(seed):
    rng = np.random.default_rng(seed)

    def rule(t, layer, head, retained):
        x = rng.random(len(retained))
        return (x / x.sum()).astype(np.float32)

    return rule


def _h2o_oracle_replay(script: ScriptedTrace, k: int, headwise: bool):
    """Greedy replay recomputing accumulated scores from the script rows.

    Keeps the newest ceil(k/2) states; beyond capacity, drops the lowest
    accumulated score (ties to the lowest position). Yields the per-head
    retained sets after every step.
    """
    recent = -(-k // 2)
    n_heads = script.n_heads
    scores = [dict() for _ in range(n_heads)]
    retained = [[] for _ in range(n_heads)]
    snapshots = []
    for t in range(script.n_steps):
        for h in range(n_heads):
            retained[h].append(t)
            row = script.rows[t][0][h]
            for slot, pos in enumerate(retained[h]):
                scores[h][pos] = scores[h].get(pos, 0.0) + float(row[slot])
        if len(retained[0]) > k:
            if headwise:
                for h in range(n_heads):
                    pool = retained[h][:len(retained[h]) - recent]
                    drop = min(pool, key=lambda p: (scores[h][p], p))
                    retained[h].remove(drop)
            else:
                pool = retained[0][:len(retained[0]) - recent]
                drop = min(pool, key=lambda p: (
                    sum(scores[h][p] for h in range(n_heads)) / n_heads, p))
                for h in range(n_heads):
                    retained[h].remove(drop)
        snapshots.append([set(r) for r in retained])
    return snapshots


def test_05_h2o_retained_set_oracle(tmp_path):
    t0 = time.perf_counter()
    k, steps = 32, 256
    bad = 0
    for case in range(200):
        headwise = case < 100
        kind = PolicyKind("h2o-head" if headwise else "h2o-layer", k)
        script, trace = simulate_with_rule(_random_rule(9000 + case), kind,
                                           steps=steps, n_heads=2)
        if case == 0:
            # the file format carries every decision: a round-trip replays
            # to the identical event log
            path = tmp_path / "script.csv"
            script.write_csv(path)
            replay = trace_driven_simulate(ScriptedTrace.read_csv(path), kind)
            assert replay.sorted_events() == trace.sorted_events()
        expect = _h2o_oracle_replay(script, k, headwise)
        got = [trace.retained_sets(0, h) for h in range(2)]
        for t in range(steps):
            for h in range(2):
                if got[h][t] != expect[t][h]:
                    bad += 1
    elapsed = time.perf_counter() - t0
    _report(5, "H2O retained-set oracle", bad == 0 and elapsed < 30.0,
            f"{bad} step mismatches over 200 scripted traces "
            f"(T={steps}, k={k}, 2 heads); {elapsed:.1f}s < 30s")


def test_06_memory_reference_row():
    t0 = time.perf_counter()
    published = {256: 0.15, 512: 0.28, 1024: 0.56, 2048: 1.11, 4096: 2.18}
    deviations = {}
    for size, ref in published.items():
        got = memory_report(32, 32, 128, size, 2).gigabytes
        deviations[size] = abs(got - ref) / ref
    worst = max(deviations.values())
    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{s}:{d * 100:.1f}%" for s, d in deviations.items())
    _report(6, "memory reference row", worst <= 0.07 and elapsed < 10.0,
            f"relative deviations {detail}, tol 7%")


def test_07_remap_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    k = 512
    bad = 0
    for _ in range(1000):
        length = int(rng.integers(k, 70001))
        positions = np.sort(rng.choice(length, size=k, replace=False))
        out = remap_positions([int(p) for p in positions])
        gaps = np.diff(out)
        if not np.all(gaps > 0):
            bad += 1
            continue
        for j in range(1, k):
            g = int(positions[j] - positions[j - 1])
            expect = float(g) if g <= 10 else math.log(math.log(g))
            if abs(float(out[j] - out[j - 1]) - expect) > 1e-9:
                bad += 1
                break
        if out[-1] - out[0] > 10.0 * (k - 1):
            bad += 1
    elapsed = time.perf_counter() - t0
    _report(7, "gap remap properties", bad == 0 and elapsed < 10.0,
            f"{bad} violations over 1000 sets (k={k}, streams to 70000): "
            f"monotone, gaps within 1e-9, span <= 10(k-1); {elapsed:.1f}s < 10s")


def test_08_marker_retention_scenario():
    t0 = time.perf_counter()
    m, k, steps = 10, 32, 500
    rule = marker_rule(m, marker_prob=0.5)

    _, tova_trace = simulate_with_rule(rule, PolicyKind("tova-layer", k), steps=steps)
    tova_sets = tova_trace.retained_sets(0, 0)
    tova_keeps = all(m in tova_sets[t] for t in range(m, steps))
    tova_never_evicts = not any(ev.action == "evict" and ev.original_position == m
                                for ev in tova_trace.events)

    _, win_trace = simulate_with_rule(rule, PolicyKind("window", k), steps=steps)
    win_evicts = [ev.step for ev in win_trace.events
                  if ev.action == "evict" and ev.original_position == m]
    win_sets = win_trace.retained_sets(0, 0)
    window_exact = (win_evicts == [m + k]
                    and m in win_sets[m + k - 1] and m not in win_sets[m + k])

    elapsed = time.perf_counter() - t0
    ok = tova_keeps and tova_never_evicts and window_exact and elapsed < 5.0
    _report(8, "marker retention", ok,
            f"TOVA keeps marker m={m} through step {steps}: {tova_keeps}; "
            f"window evicts at step {win_evicts} (expect [{m + k}]); "
            f"{elapsed:.1f}s < 5s")


def test_09_analysis_golden_tables(tmp_path):
    t0 = time.perf_counter()
    ok = True
    notes = []

    _, trace = simulate_with_rule(uniform_rule, PolicyKind("window", 2), steps=4)
    golden = np.array([[1, 0, 0, 0],
                       [1, 1, 0, 0],
                       [0, 1, 1, 0],
                       [0, 0, 1, 1]], dtype=np.float64)
    if not np.array_equal(retention_matrix(trace, 0), golden):
        ok = False
        notes.append("retention matrix")

    _, trace5 = simulate_with_rule(uniform_rule, PolicyKind("window", 2), steps=5)
    if token_lifetime(trace5) != {0: 2.0, 1: 2.0, 2: 2.0, 3: 2.0, 4: 1.0}:
        ok = False
        notes.append("lifetimes")

    table = lifetime_by_tag(trace5, {0: "NOUN", 1: "VERB", 2: "NOUN"})
    expect = [("Avg.", 1.8), ("NOUN", 2.0), ("VERB", 2.0), ("UNK", 1.5)]
    if not (len(table) == 4 and all(tag == e_tag and abs(v - e_v) < 1e-12
                                    for (tag, v), (e_tag, e_v) in zip(table, expect))):
        ok = False
        notes.append("tag table")

    _, trace12 = simulate_with_rule(uniform_rule, PolicyKind("window", 3), steps=12)
    if recent_proportion(trace12, k=3) != 1.0:
        ok = False
        notes.append("recent proportion")

    elapsed = time.perf_counter() - t0
    _report(9, "analysis golden tables", ok and elapsed < 5.0,
            ("all four tables exact" if ok else "mismatch: " + ", ".join(notes))
            + f"; {elapsed:.1f}s < 5s")


def test_10_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    stream = tmp_path / "stream.txt"
    stream.write_text("".join(f"{int(x)}\n" for x in rng.integers(0, 256, 160)))
    tags = tmp_path / "tags.tsv"
    tags.write_text("0\tPROMPT\n1\tPROMPT\n9\tBODY\n")
    kind = parse_policy("window", k=6)
    script, _ = simulate_with_rule(uniform_rule, kind, steps=24)
    script_path = tmp_path / "script.csv"
    script.write_csv(script_path)

    def commands(root):
        trace = str(root / "p" / "trace.csv")
        return [
            ["perplexity", "--seed", "5", "--stream", str(stream),
             "--policy", "tova-head", "--k", "16", "--chunk-len", "32",
             "--out-dir", str(root / "p"), "--trace-out", trace],
            ["perplexity-parallel", "--seed", "5", "--stream", str(stream),
             "--policy", "h2o-layer", "--k", "16", "--chunk-len", "32",
             "--threads", "2", "--out-dir", str(root / "pp")],
            ["perplexity", "--seed", "5", "--stream", str(stream),
             "--policy", "window", "--k", "8", "--chunk-len", "64",
             "--remap", "--out-dir", str(root / "pr")],
            ["generate", "--seed", "5", "--stream", str(stream),
             "--policy", "window", "--k", "8", "--chunk-len", "32",
             "--truncate", "--max-steps", "10", "--out-dir", str(root / "g")],
            ["simulate-trace", "--script", str(script_path),
             "--policy", "window", "--k", "6", "--out-dir", str(root / "st")],
            ["analyze", "retention", "--trace", trace, "--layer", "1",
             "--out-dir", str(root / "ar")],
            ["analyze", "lifetime", "--trace", trace, "--out-dir", str(root / "al")],
            ["analyze", "tags", "--trace", trace, "--tags", str(tags),
             "--out-dir", str(root / "at")],
            ["analyze", "recent", "--trace", trace, "--k", "16",
             "--out-dir", str(root / "ac")],
            ["memory-report", "--budget", "8000000000",
             "--out-dir", str(root / "m")],
        ]

    outputs = []
    for run in ("run1", "run2"):
        root = tmp_path / run
        for argv in commands(root):
            assert main(argv) == 0, argv
        files = sorted(p for p in root.rglob("*") if p.is_file())
        outputs.append({p.relative_to(root): p.read_bytes() for p in files})

    same_names = set(outputs[0]) == set(outputs[1])
    diffs = [str(name) for name in outputs[0]
             if same_names and outputs[0][name] != outputs[1][name]]
    ok = same_names and not diffs and len(outputs[0]) >= 14
    elapsed = time.perf_counter() - t0
    _report(10, "CLI determinism", ok,
            f"{len(outputs[0])} files from 10 commands byte-identical across "
            f"reruns{'' if not diffs else ': differs ' + ', '.join(diffs)}; "
            f"{elapsed:.1f}s")
