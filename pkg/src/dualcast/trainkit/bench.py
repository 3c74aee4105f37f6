"""Wall-clock comparison of the spatial attention kernels."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass

import numpy as np

from ..attention import dense_masked_attention, global_attention, sim_local_attention, subtree_local_attention
from ..graphs import SensorGraph, build_rct_adjacency, build_sim_adjacency, grid_graph
from ..ndtensor import Tensor, no_grad

KERNELS = ("dense", "global", "rct_local", "sim_local")
BENCH_COLUMNS = ("n_nodes", "kernel", "median_seconds", "reps", "nnz")


@dataclass
class BenchRow:
    n_nodes: int
    kernel: str
    median_seconds: float
    reps: int
    nnz: int | None = None


def bench_graph(n: int) -> SensorGraph:
    """Near-square grid with exactly ``n`` nodes (last row may be partial)."""
    cols = int(math.ceil(math.sqrt(n)))
    full = grid_graph(int(math.ceil(n / cols)), cols)
    edges = [(a, b) for a, b in full.edges if a < n and b < n]
    return SensorGraph(n, tuple(edges))


def _median_time(fn, reps: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def benchmark_attention(sizes=(128, 256, 512), steps: int = 4, d: int = 16, reps: int = 5,
                        batch: int = 4, n_levels: int = 2, seed: int = 0) -> list[BenchRow]:
    """Median wall time of each kernel per graph size.

    dense and global attend over all N nodes of every time slice. The two
    cross-time kernels run over the N*steps rows: rct propagates summaries
    for ``n_levels`` levels, sim is masked softmax attention over the flat
    two-hop matrix.
    """
    if reps < 5:
        raise ValueError("need at least 5 repetitions")
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    with no_grad():
        for n in sizes:
            q, k, v = (Tensor(rng.standard_normal((batch, steps, n, d))) for _ in range(3))
            flat = [Tensor(t.data.reshape(batch, steps * n, d)) for t in (q, k, v)]
            graph = bench_graph(n)
            rct = build_rct_adjacency(graph, steps)
            sim = build_sim_adjacency(graph, steps)
            w_rct = Tensor(np.full(n_levels + 1, 1.0 / (n_levels + 1)))
            w_sim = Tensor(np.full(2, 0.5))
            rct.csr, sim.csr  # build the sparse matrices outside the timed region
            jobs = {
                "dense": (lambda: dense_masked_attention(q, k, v), None),
                "global": (lambda: global_attention(q, k, v), None),
                "rct_local": (lambda: subtree_local_attention(*flat, rct, w_rct), rct.nnz),
                "sim_local": (lambda: sim_local_attention(*flat, sim, w_sim), sim.nnz),
            }
            for name in KERNELS:
                fn, nnz = jobs[name]
                rows.append(BenchRow(n, name, _median_time(fn, reps), reps, nnz))
    return rows


def doubling_ratios(rows: list[BenchRow], kernel: str) -> list[float]:
    """t(2N)/t(N) for consecutive sizes that double."""
    times = {r.n_nodes: r.median_seconds for r in rows if r.kernel == kernel}
    return [times[2 * n] / times[n] for n in sorted(times) if 2 * n in times]


def write_bench_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(BENCH_COLUMNS)
        for r in rows:
            writer.writerow([r.n_nodes, r.kernel, repr(r.median_seconds), r.reps, "" if r.nnz is None else r.nnz])
