"""Attention kernels: ReLU feature-mapped linear attention (global and rooted
sub-tree local), dense softmax attention, and temporal attention.

All kernels take ``Q``, ``K``, ``V`` shaped ``(..., rows, d)``; leading axes
are batch axes.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import ndtensor as nd
from .graphs import CrossTimeAdjacency
from .layers import Linear, Module
from .ndtensor import Tensor

EPS_DEN = 1e-8


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.shape != k.shape:
        raise nd.ShapeError(f"query {q.shape} and key {k.shape} shapes differ")
    if v.shape[:-1] != k.shape[:-1]:
        raise nd.ShapeError(f"value {v.shape} rows do not match key {k.shape}")


def _mask_matrix(m, rows: int):
    if isinstance(m, CrossTimeAdjacency):
        m = m.csr
    elif not sp.issparse(m):
        m = np.asarray(m, dtype=float)
    if m.shape != (rows, rows):
        raise nd.ShapeError(f"mask {m.shape} does not match {rows} rows")
    return m


def _outer_summaries(phi_k: Tensor, v: Tensor) -> Tensor:
    """Per-row phi(K_m)^T V_m, shape (..., rows, d, dv)."""
    lead = phi_k.shape
    return nd.matmul(nd.reshape(phi_k, lead + (1,)), nd.reshape(v, v.shape[:-1] + (1, v.shape[-1])))


def _readout(phi_q: Tensor, num: Tensor, den: Tensor, eps: float) -> Tensor:
    """h_n = phi(Q_n) num_n / (phi(Q_n) . den_n + eps)."""
    q_row = nd.reshape(phi_q, phi_q.shape[:-1] + (1, phi_q.shape[-1]))
    top = nd.reshape(nd.matmul(q_row, num), phi_q.shape[:-1] + (num.shape[-1],))
    bottom = nd.sum_(phi_q * den, axis=-1, keepdims=True) + eps
    return top / bottom


def linear_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, eps: float = EPS_DEN) -> Tensor:
    """Feature-mapped attention with phi = ReLU.

    ``mask=None`` means the all-ones mask: the key/value sums are computed once
    per slice and shared by every query row, O(rows * d^2). Otherwise the
    per-row summaries are propagated through ``mask`` (dense, sparse or a
    :class:`CrossTimeAdjacency`).
    """
    q, k, v = nd.as_tensor(q), nd.as_tensor(k), nd.as_tensor(v)
    _check_qkv(q, k, v)
    phi_q, phi_k = nd.relu(q), nd.relu(k)
    if mask is None:
        s_num = nd.matmul(nd.swapaxes(phi_k, -1, -2), v)  # (..., d, dv)
        s_den = nd.sum_(phi_k, axis=-2, keepdims=True)  # (..., 1, d)
        top = nd.matmul(phi_q, s_num)
        bottom = nd.sum_(phi_q * s_den, axis=-1, keepdims=True) + eps
        return top / bottom
    m = _mask_matrix(mask, q.shape[-2])
    p_num = nd.propagate(m, _outer_summaries(phi_k, v), axis=-3)
    p_den = nd.propagate(m, phi_k, axis=-2)
    return _readout(phi_q, p_num, p_den, eps)


def global_attention(q: Tensor, k: Tensor, v: Tensor, eps: float = EPS_DEN) -> Tensor:
    return linear_attention(q, k, v, None, eps)


def naive_linear_attention(q, k, v, mask=None, eps: float = EPS_DEN) -> np.ndarray:
    """Literal per-(n, m) double loop over a single (rows, d) slice."""
    q, k, v = (np.asarray(getattr(x, "data", x), dtype=float) for x in (q, k, v))
    rows, d = q.shape
    if k.shape != q.shape or v.shape[0] != rows:
        raise nd.ShapeError(f"shapes {q.shape}, {k.shape}, {v.shape} do not conform")
    m = np.ones((rows, rows)) if mask is None else _dense(mask)
    phi_q, phi_k = np.maximum(q, 0.0), np.maximum(k, 0.0)
    out = np.zeros((rows, v.shape[1]))
    for n in range(rows):
        num = np.zeros((d, v.shape[1]))
        den = np.zeros(d)
        for j in range(rows):
            if m[n, j] != 0:
                num += m[n, j] * np.outer(phi_k[j], v[j])
                den += m[n, j] * phi_k[j]
        out[n] = phi_q[n] @ num / (phi_q[n] @ den + eps)
    return out


def _dense(mask) -> np.ndarray:
    if isinstance(mask, CrossTimeAdjacency):
        return mask.to_dense()
    if sp.issparse(mask):
        return mask.toarray()
    return np.asarray(mask, dtype=float)


def subtree_local_attention(q: Tensor, k: Tensor, v: Tensor, adj, weights,
                            eps: float = EPS_DEN, return_levels: bool = False):
    """Rooted sub-tree local attention over cross-time rows.

    Level 0 is ``V``. Level k propagates the per-row key/value summaries one
    more step through ``adj`` (so level k sees the k-th matrix power) and reads
    them out with the query. The result is ``sum_k weights[k] * H^k``; the
    level count is ``len(weights) - 1``.
    """
    q, k, v = nd.as_tensor(q), nd.as_tensor(k), nd.as_tensor(v)
    weights = nd.as_tensor(weights)
    _check_qkv(q, k, v)
    rows = q.shape[-2]
    size = adj.size if isinstance(adj, CrossTimeAdjacency) else adj.shape[0]
    if size != rows:
        raise nd.ShapeError(f"adjacency has {size} rows, inputs have {rows}")
    m = _mask_matrix(adj, rows)
    n_levels = weights.shape[0] - 1
    phi_q, phi_k = nd.relu(q), nd.relu(k)
    levels = [v]
    p_num, p_den = _outer_summaries(phi_k, v), phi_k
    for _ in range(n_levels):
        p_num = nd.propagate(m, p_num, axis=-3)
        p_den = nd.propagate(m, p_den, axis=-2)
        levels.append(_readout(phi_q, p_num, p_den, eps))
    out = levels[0] * weights[0]
    for i in range(1, len(levels)):
        out = out + levels[i] * weights[i]
    return (out, levels) if return_levels else out


def sim_local_attention(q: Tensor, k: Tensor, v: Tensor, adj, weights) -> Tensor:
    """Flat variant over a precomputed multi-hop matrix: softmax self-attention
    restricted to the nonzeros of ``adj`` (each row also sees itself), mixed
    with ``V`` as ``weights[0] * V + weights[1] * H``. Quadratic in the row
    count, like any masked softmax attention."""
    q, k, v = nd.as_tensor(q), nd.as_tensor(k), nd.as_tensor(v)
    weights = nd.as_tensor(weights)
    if weights.shape != (2,):
        raise nd.ShapeError(f"sim attention takes 2 weights, got shape {weights.shape}")
    mask = np.array(_dense(adj), dtype=float)
    np.fill_diagonal(mask, 1.0)
    h = dense_masked_attention(q, k, v, mask)
    return v * weights[0] + h * weights[1]


def fuse_local_global(h_loc: Tensor, h_glo: Tensor, w_glo) -> Tensor:
    h_loc, h_glo = nd.as_tensor(h_loc), nd.as_tensor(h_glo)
    if h_loc.shape != h_glo.shape:
        raise nd.ShapeError(f"local {h_loc.shape} and global {h_glo.shape} shapes differ")
    return h_loc + nd.as_tensor(w_glo) * h_glo


def dense_masked_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, mode: str = "additive") -> Tensor:
    """softmax(Q K^T / sqrt(d)) V with an optional binary mask.

    ``additive`` masking excludes masked pairs (weight exactly 0). ``product``
    multiplies the scaled similarity by the mask before the softmax, which
    leaves masked pairs with weight proportional to e^0.
    """
    q, k, v = nd.as_tensor(q), nd.as_tensor(k), nd.as_tensor(v)
    _check_qkv(q, k, v)
    scores = nd.matmul(q, nd.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is None:
        weights = nd.softmax(scores, axis=-1)
    else:
        m = _dense(mask)
        if m.shape != (q.shape[-2], k.shape[-2]):
            raise nd.ShapeError(f"mask {m.shape} does not match scores {scores.shape[-2:]}")
        if mode == "additive":
            weights = nd.masked_softmax(scores, m, axis=-1)
        elif mode == "product":
            weights = nd.softmax(scores * m, axis=-1)
        else:
            raise ValueError(f"unknown mask mode {mode!r}")
    return nd.matmul(weights, v)


def temporal_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = True) -> Tensor:
    """Dense attention over the time axis (second to last); with ``causal``
    step t only attends to steps <= t."""
    q = nd.as_tensor(q)
    steps = q.shape[-2]
    if steps == 0:
        raise ValueError("temporal attention needs at least one step")
    mask = np.tril(np.ones((steps, steps))) if causal else None
    return dense_masked_attention(q, k, v, mask)


class ProjectionHead(Module):
    """Query/key/value maps of width ``d`` from input width ``d_in``."""

    def __init__(self, rng: np.random.Generator, d_in: int, d: int):
        self.query = Linear(rng, d_in, d, bias=False)
        self.key = Linear(rng, d_in, d, bias=False)
        self.value = Linear(rng, d_in, d, bias=False)

    def __call__(self, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        return self.query(h), self.key(h), self.value(h)


class SubtreeWeights(Module):
    def __init__(self, n_levels: int):
        if n_levels < 0:
            raise ValueError("level count must be >= 0")
        self.levels = Tensor(np.full(n_levels + 1, 1.0 / (n_levels + 1)), requires_grad=True)
        self.glo = Tensor(0.5, requires_grad=True)


class CrossTimeAttention(Module):
    """Spatial layer: global attention per time step fused with sub-tree
    local attention over the cross-time graph of the whole window."""

    def __init__(self, rng: np.random.Generator, d_in: int, d: int, n_levels: int):
        self.head = ProjectionHead(rng, d_in, d)
        self.weights = SubtreeWeights(n_levels)

    def __call__(self, h: Tensor, adj: CrossTimeAdjacency) -> Tensor:
        b, t, n, _ = h.shape
        q, k, v = self.head(h)
        h_glo = global_attention(q, k, v)  # batch axes (B, T)
        flat = lambda x: nd.reshape(x, (b, t * n, x.shape[-1]))
        local = sim_local_attention if adj.kind == "sim" else subtree_local_attention
        h_loc = local(flat(q), flat(k), flat(v), adj, self.weights.levels)
        h_loc = nd.reshape(h_loc, (b, t, n, h_loc.shape[-1]))
        return fuse_local_global(h_loc, h_glo, self.weights.glo)


class TemporalAttention(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d: int, causal: bool = True):
        self.head = ProjectionHead(rng, d_in, d)
        self.causal = causal

    def __call__(self, h: Tensor) -> Tensor:
        q, k, v = self.head(nd.transpose(h, (0, 2, 1, 3)))  # (B, N, T, D)
        out = temporal_attention(q, k, v, self.causal)
        return nd.transpose(out, (0, 2, 1, 3))
