"""Sensor graphs and the cross-time adjacency structures built on them.

Cross-time matrices index row ``t * N + n`` for node ``n`` at step ``t`` of a
window of ``steps`` snapshots.
"""
from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class SensorGraph:
    """Undirected, unweighted sensor graph without self-loops."""

    n_nodes: int
    edges: tuple[tuple[int, int], ...]  # (i, j) with i < j, sorted

    @cached_property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def neighbours(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, j in self.edges:
            out[i].append(j)
            out[j].append(i)
        return out

    def permuted(self, perm: np.ndarray) -> "SensorGraph":
        """Relabel node ``perm[k]`` as ``k``."""
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return from_edges(self.n_nodes, ((int(inv[i]), int(inv[j])) for i, j in self.edges))


def from_edges(n_nodes: int, pairs: Iterable[tuple[int, int]]) -> SensorGraph:
    """Symmetrize, deduplicate and drop self-loops."""
    edges = set()
    for i, j in pairs:
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise ValueError(f"edge ({i}, {j}) out of range for {n_nodes} nodes")
        if i != j:
            edges.add((min(i, j), max(i, j)))
    return SensorGraph(n_nodes, tuple(sorted(edges)))


def load_sensor_graph(source, n_nodes: int | None = None) -> SensorGraph:
    """Read an edge list: one ``src,dst`` pair per line, 0-based, ``#`` comments.

    ``source`` is a path or an iterable of lines. Without ``n_nodes`` the node
    count is one past the largest index seen.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source) as fh:
            lines = fh.read().splitlines()
    else:
        lines = list(source)
    pairs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            i, j = int(parts[0]), int(parts[1])
            if len(parts) != 2:
                raise ValueError
        except (ValueError, IndexError):
            raise ValueError(f"line {lineno}: malformed edge {raw!r}") from None
        if i < 0 or j < 0 or (n_nodes is not None and (i >= n_nodes or j >= n_nodes)):
            raise ValueError(f"line {lineno}: node index out of range in {raw!r}")
        pairs.append((i, j))
    if n_nodes is None:
        n_nodes = 1 + max((max(p) for p in pairs), default=-1)
    return from_edges(n_nodes, pairs)


def write_edge_list(graph: SensorGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {graph.n_nodes} nodes, {graph.n_edges} undirected edges\n")
        for i, j in graph.edges:
            fh.write(f"{i},{j}\n")


def path_graph(n: int) -> SensorGraph:
    return from_edges(n, ((i, i + 1) for i in range(n - 1)))


def grid_graph(rows: int, cols: int) -> SensorGraph:
    pairs = []
    for r in range(rows):
        for c in range(cols):
            k = r * cols + c
            if c + 1 < cols:
                pairs.append((k, k + 1))
            if r + 1 < rows:
                pairs.append((k, k + cols))
    return from_edges(rows * cols, pairs)


def random_graph(n: int, p: float, rng: np.random.Generator) -> SensorGraph:
    """Erdos-Renyi graph, plus a path backbone so it stays connected."""
    pairs = [(i, i + 1) for i in range(n - 1)]
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < p
    pairs.extend(zip(iu[keep].tolist(), ju[keep].tolist()))
    return from_edges(n, pairs)


@dataclass(frozen=True)
class CrossTimeAdjacency:
    """Block matrix over ``steps`` graph snapshots, stored as index pairs."""

    n_nodes: int
    steps: int
    span: int
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)
    kind: str = "rct"

    @property
    def size(self) -> int:
        return self.n_nodes * self.steps

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    @cached_property
    def csr(self) -> sp.csr_matrix:
        data = np.ones(self.rows.size)
        return sp.csr_matrix((data, (self.rows, self.cols)), shape=(self.size, self.size))

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()


def _block_pairs(n: int, steps: int, span: int, same_time: np.ndarray, cross_time: np.ndarray):
    si, sj = np.nonzero(same_time)
    ci, cj = np.nonzero(cross_time)
    rows, cols = [], []
    for t in range(steps):
        rows.append(t * n + si)
        cols.append(t * n + sj)
        for d in range(1, min(span, steps - 1 - t) + 1):
            u = t + d
            rows.extend([t * n + ci, u * n + cj])
            cols.extend([u * n + cj, t * n + ci])
    r = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
    c = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    order = np.lexsort((c, r))
    return r[order].astype(np.int64), c[order].astype(np.int64)


def _check(steps: int, span: int) -> None:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if span < 0:
        raise ValueError(f"span must be >= 0, got {span}")


def build_rct_adjacency(g: SensorGraph, steps: int, span: int = 1) -> CrossTimeAdjacency:
    """A on the diagonal blocks, the identity on blocks at time distance 1..span."""
    _check(steps, span)
    eye = np.eye(g.n_nodes)
    rows, cols = _block_pairs(g.n_nodes, steps, span, g.adjacency, eye)
    return CrossTimeAdjacency(g.n_nodes, steps, span, rows, cols, "rct")


def build_sim_adjacency(g: SensorGraph, steps: int, span: int = 1) -> CrossTimeAdjacency:
    """Flat two-hop variant: binarize(A + A^2) on the diagonal blocks,
    binarize(I + A) on blocks at time distance 1..span."""
    _check(steps, span)
    a = g.adjacency
    same = ((a + a @ a) > 0).astype(float)
    cross = ((np.eye(g.n_nodes) + a) > 0).astype(float)
    rows, cols = _block_pairs(g.n_nodes, steps, span, same, cross)
    return CrossTimeAdjacency(g.n_nodes, steps, span, rows, cols, "sim")


def rct_nnz(g: SensorGraph, steps: int, span: int) -> int:
    """Closed-form nonzero count of the rct matrix."""
    nnz_a = 2 * g.n_edges
    return steps * nnz_a + 2 * sum((steps - d) * g.n_nodes for d in range(1, min(span, steps - 1) + 1))


def k_hop_reachability(adj, k: int) -> np.ndarray:
    """Binary matrix with (i, j) = 1 iff j is reachable from i in at most k hops (BFS)."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if isinstance(adj, SensorGraph):
        dense = adj.adjacency
    elif isinstance(adj, CrossTimeAdjacency):
        dense = adj.to_dense()
    else:
        dense = np.asarray(adj)
    n = dense.shape[0]
    nbrs = [np.nonzero(dense[i])[0] for i in range(n)]
    out = np.zeros((n, n))
    for src in range(n):
        depth = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            if depth[u] == k:
                continue
            for v in nbrs[u]:
                if v not in depth:
                    depth[v] = depth[u] + 1
                    queue.append(v)
        out[src, list(depth)] = 1.0
    return out
