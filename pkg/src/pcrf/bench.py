"""Timing and allocation audit for the low-rank field update."""

from __future__ import annotations

import time
import tracemalloc

import numpy as np
from threadpoolctl import threadpool_limits

from .mfvi import init_marginals, mfvi_step
from .unary import UnaryScores

DEFAULT_SIZES = (2000, 4000, 8000, 16000)
DEFAULT_BENCH_RANK = 128
DEFAULT_REPEATS = 30


def _setup(n, rank, rng):
    # small factor scale keeps the marginals away from saturation
    e0 = rng.standard_normal((n, rank)) * 0.02
    e1 = rng.standard_normal((n, rank)) * 0.02
    scores = UnaryScores(theta1=rng.standard_normal(n))
    return scores, e0, e1


def time_update(n, rank=DEFAULT_BENCH_RANK, repeats=DEFAULT_REPEATS, rng=None):
    """Median seconds for one damped update at the given size."""
    if rng is None:
        rng = np.random.default_rng(0)
    scores, e0, e1 = _setup(n, rank, rng)
    state = init_marginals(scores)
    for _ in range(3):
        state = mfvi_step(state, scores, e0, e1)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        state = mfvi_step(state, scores, e0, e1)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def audit_update(n, rank=DEFAULT_BENCH_RANK, rng=None) -> int:
    """Peak bytes newly allocated during one update (inputs excluded)."""
    if rng is None:
        rng = np.random.default_rng(0)
    scores, e0, e1 = _setup(n, rank, rng)
    state = init_marginals(scores)
    tracemalloc.start()
    tracemalloc.reset_peak()
    mfvi_step(state, scores, e0, e1)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    return int(peak)


def run_bench(sizes=DEFAULT_SIZES, rank=DEFAULT_BENCH_RANK, repeats=DEFAULT_REPEATS,
              threads=1, seed=0):
    """Rows of {n, rank, seconds_per_update, ratio_vs_prev, peak_alloc_bytes}.

    Thread count is pinned so the ratios measure scaling, not scheduling.
    The allocation audit runs untimed; a full N x N buffer would show up
    as 8 N^2 bytes and the reported peaks stay orders of magnitude below.
    """
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=threads):
        for i, n in enumerate(sizes):
            seconds = time_update(n, rank, repeats, rng)
            peak = audit_update(n, rank, rng)
            ratio = seconds / rows[-1]["seconds_per_update"] if i else None
            rows.append({
                "n": int(n),
                "rank": int(rank),
                "seconds_per_update": seconds,
                "ratio_vs_prev": ratio,
                "peak_alloc_bytes": peak,
                "dense_matrix_bytes": 8 * int(n) * int(n),
            })
    return rows


def format_bench_table(rows) -> str:
    lines = [f"{'n':>8} {'ms/update':>12} {'ratio':>8} {'peak MB':>10} {'n^2 MB':>10}"]
    for r in rows:
        ratio = "" if r["ratio_vs_prev"] is None else f"{r['ratio_vs_prev']:.2f}"
        lines.append(f"{r['n']:>8} {1e3 * r['seconds_per_update']:>12.3f} {ratio:>8} "
                     f"{r['peak_alloc_bytes'] / 1e6:>10.2f} "
                     f"{r['dense_matrix_bytes'] / 1e6:>10.1f}")
    return "\n".join(lines)
