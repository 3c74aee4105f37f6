"""Training objectives: prediction, filter, environment and DBI losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndtensor as nd
from .ndtensor import Tensor

EPS_KL = 1e-6
EPS_SEP = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0
    p_norm: int = 2

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {getattr(self, name)}")
        if self.p_norm not in (1, 2):
            raise ValueError(f"p_norm must be 1 or 2, got {self.p_norm}")


@dataclass
class LossBreakdown:
    l_pred: Tensor
    l_flt: Tensor
    l_env: Tensor
    l_dbi: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_pred", "l_flt", "l_env", "l_dbi", "total")}


def _reciprocal_kl(p: Tensor, q: Tensor, eps_kl: float) -> Tensor:
    kl = nd.maximum_scalar(nd.kl_divergence(p, q), eps_kl)
    return 1.0 / kl


def filter_loss(g_i: Tensor, g_e: Tensor, eps_kl: float = EPS_KL) -> Tensor:
    """1 / max(KL(softmax(g_i) || softmax(g_e)), eps_kl), batch-mean KL."""
    g_i, g_e = nd.as_tensor(g_i), nd.as_tensor(g_e)
    if g_i.shape != g_e.shape or g_i.ndim != 2:
        raise nd.ShapeError(f"filter_loss expects equal (B, D) shapes, got {g_i.shape} and {g_e.shape}")
    return _reciprocal_kl(nd.softmax(g_i, -1), nd.softmax(g_e, -1), eps_kl)


def derangement(batch: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Cyclic shift by one, or a seeded random permutation without fixed points."""
    if rng is None or batch < 2:
        return (np.arange(batch) + 1) % max(batch, 1)
    while True:
        perm = rng.permutation(batch)
        if not np.any(perm == np.arange(batch)):
            return perm


def environment_loss(g_e: Tensor, rng: np.random.Generator | None = None, eps_kl: float = EPS_KL) -> Tensor:
    """1 / max(KL(pi(softmax(g_e)) || softmax(g_e)), eps_kl) where pi
    rearranges the batch without fixed points; 0 for a batch of one."""
    g_e = nd.as_tensor(g_e)
    if g_e.ndim != 2:
        raise nd.ShapeError(f"environment_loss expects (B, D), got {g_e.shape}")
    if g_e.shape[0] < 2:
        return Tensor(0.0)
    dist = nd.softmax(g_e, -1)
    permuted = nd.gather(dist, derangement(g_e.shape[0], rng), axis=0)
    return _reciprocal_kl(permuted, dist, eps_kl)


@dataclass
class DBIComponents:
    patterns: list[int]  # present pattern ids, ascending
    compactness: Tensor  # S_p, (K,)
    separation: Tensor  # P_{p,q}, (K, K)
    ratio: Tensor  # R_{p,q}, (K, K)
    score: Tensor  # D_p, (K,)


def dbi_components(z_i: Tensor, psi: Tensor, ids, eps_sep: float = EPS_SEP) -> DBIComponents:
    z_i, psi = nd.as_tensor(z_i), nd.as_tensor(psi)
    ids = np.asarray(ids, dtype=np.int64)
    if z_i.shape[0] != ids.size or z_i.shape[1:] != psi.shape[1:]:
        raise nd.ShapeError(f"samples {z_i.shape}, prototypes {psi.shape}, {ids.size} ids do not conform")
    present = np.unique(ids)
    k = present.size
    naxes = z_i.ndim - 1
    dist = nd.l2norm(nd.gather(psi, ids, axis=0) - z_i, naxes)  # (B,)
    member = (ids[None, :] == present[:, None]).astype(float)
    avg = member / member.sum(axis=1, keepdims=True)
    compact = nd.matmul(Tensor(avg), nd.reshape(dist, (-1, 1)))
    compact = nd.reshape(compact, (k,))
    protos = nd.reshape(nd.gather(psi, present, axis=0), (k, -1))
    left = nd.gather(protos, np.repeat(np.arange(k), k), axis=0)
    right = nd.gather(protos, np.tile(np.arange(k), k), axis=0)
    sep = nd.reshape(nd.l2norm(left - right, 1), (k, k))
    pair_sum = nd.reshape(compact, (k, 1)) + nd.reshape(compact, (1, k))
    ratio = pair_sum / (sep + eps_sep)
    if k < 2:
        score = Tensor(np.zeros(k))
    else:
        off = np.array([[p * k + q for q in range(k) if q != p] for p in range(k)])
        score = nd.max_(nd.gather(nd.reshape(ratio, (k * k,)), off, axis=0), axis=-1)
    return DBIComponents(present.tolist(), compact, sep, ratio, score)


def dbi_loss(z_i: Tensor, psi: Tensor, ids, eps_sep: float = EPS_SEP) -> Tensor:
    """Mean of D_p over patterns present in the batch; 0 with fewer than two."""
    if np.unique(np.asarray(ids)).size < 2:
        return Tensor(0.0)
    return nd.mean(dbi_components(z_i, psi, ids, eps_sep).score)


def prediction_loss(pred: Tensor, target, p_norm: int = 2) -> Tensor:
    pred, target = nd.as_tensor(pred), nd.as_tensor(target)
    if pred.shape != target.shape:
        raise nd.ShapeError(f"prediction {pred.shape} and target {target.shape} shapes differ")
    diff = pred - target
    if p_norm == 2:
        return nd.mean(diff * diff)
    if p_norm == 1:
        return nd.mean(nd.abs_(diff))
    raise ValueError(f"p_norm must be 1 or 2, got {p_norm}")


def total_loss(l_pred: Tensor, l_flt: Tensor, l_env: Tensor, l_dbi: Tensor, weights: LossWeights) -> LossBreakdown:
    total = l_pred
    for w, term in ((weights.alpha, l_flt), (weights.beta, l_env), (weights.gamma, l_dbi)):
        if w < 0:
            raise ValueError("loss weights must be nonnegative")
        if w != 0:
            total = total + w * term
    return LossBreakdown(l_pred, nd.as_tensor(l_flt), nd.as_tensor(l_env), nd.as_tensor(l_dbi), total)
