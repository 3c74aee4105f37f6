import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualcast import ndtensor as nd
from dualcast.attention import (EPS_DEN, CrossTimeAttention, ProjectionHead, SubtreeWeights, TemporalAttention,
                                dense_masked_attention, fuse_local_global, global_attention, linear_attention,
                                naive_linear_attention, sim_local_attention, subtree_local_attention,
                                temporal_attention)
from dualcast.graphs import build_rct_adjacency, build_sim_adjacency, from_edges, path_graph, random_graph
from dualcast.ndtensor import Tensor, grad_check


def qkv(rng, rows, d, dv=None, lead=()):
    dv = dv or d
    return (rng.standard_normal(lead + (rows, d)), rng.standard_normal(lead + (rows, d)),
            rng.standard_normal(lead + (rows, dv)))


def test_single_row_returns_v():
    out = linear_attention(Tensor([[1.0, 2.0]]), Tensor([[0.5, 1.0]]), Tensor([[3.0, -4.0]]), np.ones((1, 1)))
    np.testing.assert_allclose(out.data, [[3.0, -4.0]], rtol=1e-8)


def test_all_negative_keys_give_zero():
    rng = np.random.default_rng(0)
    q, _, v = qkv(rng, 4, 3)
    k = -np.abs(rng.standard_normal((4, 3))) - 0.1
    out = linear_attention(Tensor(q), Tensor(k), Tensor(v), np.ones((4, 4))).data
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_zero_mask_gives_zero():
    rng = np.random.default_rng(1)
    q, k, v = qkv(rng, 5, 3)
    np.testing.assert_allclose(naive_linear_attention(q, k, v, np.zeros((5, 5))), 0.0, atol=1e-12)
    np.testing.assert_allclose(linear_attention(Tensor(q), Tensor(k), Tensor(v), np.zeros((5, 5))).data, 0.0,
                               atol=1e-12)


def test_random_masked_instance_matches_naive():
    rng = np.random.default_rng(2)
    q, k, v = qkv(rng, 6, 4)
    m = (rng.random((6, 6)) < 0.5).astype(float)
    np.testing.assert_allclose(linear_attention(Tensor(q), Tensor(k), Tensor(v), m).data,
                               naive_linear_attention(q, k, v, m), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(rows=st.integers(1, 32), d=st.integers(1, 8), dv=st.integers(1, 8), seed=st.integers(0, 2**31),
       density=st.floats(0.0, 1.0), full=st.booleans())
def test_linear_matches_naive_fuzz(rows, d, dv, seed, density, full):
    rng = np.random.default_rng(seed)
    q, k, v = qkv(rng, rows, d, dv)
    m = None if full else (rng.random((rows, rows)) < density).astype(float)
    got = linear_attention(Tensor(q), Tensor(k), Tensor(v), m).data
    np.testing.assert_allclose(got, naive_linear_attention(q, k, v, m), atol=1e-9, rtol=0)


def test_global_examples():
    rng = np.random.default_rng(3)
    q, k, v = qkv(rng, 1, 3)
    k = np.abs(k) + 0.1
    q = np.abs(q) + 0.1
    np.testing.assert_allclose(global_attention(Tensor(q), Tensor(k), Tensor(v)).data, v, rtol=1e-8)
    q, k, v = qkv(rng, 7, 3, lead=(2, 3))
    got = global_attention(Tensor(q), Tensor(k), Tensor(v)).data
    for b in range(2):
        for t in range(3):
            np.testing.assert_allclose(got[b, t], naive_linear_attention(q[b, t], k[b, t], v[b, t], np.ones((7, 7))),
                                       atol=1e-9)


def test_subtree_level_zero_is_weighted_v():
    rng = np.random.default_rng(4)
    q, k, v = qkv(rng, 6, 3)
    adj = build_rct_adjacency(path_graph(3), 2)
    out = subtree_local_attention(Tensor(q), Tensor(k), Tensor(v), adj, Tensor([0.7])).data
    np.testing.assert_allclose(out, 0.7 * v)


def test_subtree_edgeless_graph_collapses_levels():
    rng = np.random.default_rng(5)
    q, k, v = qkv(rng, 3, 2)
    adj = build_rct_adjacency(from_edges(3, []), 1)
    out, levels = subtree_local_attention(Tensor(q), Tensor(k), Tensor(v), adj, Tensor([0.5, 0.3, 0.2]),
                                          return_levels=True)
    for lv in levels[1:]:
        np.testing.assert_allclose(lv.data, 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data, 0.5 * v, atol=1e-12)


def _matrix_power_check(graph, steps, n_levels, rng, lead=()):
    adj = build_rct_adjacency(graph, steps)
    rows = adj.size
    q, k, v = qkv(rng, rows, 3, 2, lead)
    w = rng.standard_normal(n_levels + 1)
    out, levels = subtree_local_attention(Tensor(q), Tensor(k), Tensor(v), adj, Tensor(w), return_levels=True)
    m = adj.to_dense()
    power = np.eye(rows)
    expected_total = w[0] * v
    for lvl in range(1, n_levels + 1):
        power = power @ m
        for idx in np.ndindex(*lead):
            ref = naive_linear_attention(q[idx], k[idx], v[idx], power)
            np.testing.assert_allclose(levels[lvl].data[idx], ref, atol=1e-9, rtol=0)
        expected_total = expected_total + w[lvl] * levels[lvl].data
    np.testing.assert_allclose(levels[0].data, v)
    np.testing.assert_allclose(out.data, expected_total, atol=1e-12)


def test_subtree_two_node_example_matches_matrix_power():
    _matrix_power_check(path_graph(2), 2, 2, np.random.default_rng(6))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 8), steps=st.integers(1, 3), n_levels=st.integers(0, 3), seed=st.integers(0, 2**31))
def test_subtree_matches_matrix_power_fuzz(n, steps, n_levels, seed):
    rng = np.random.default_rng(seed)
    _matrix_power_check(random_graph(n, 0.3, rng), steps, n_levels, rng, lead=(2,))


def test_subtree_rejects_row_mismatch():
    rng = np.random.default_rng(7)
    q, k, v = qkv(rng, 5, 2)
    with pytest.raises(nd.ShapeError, match="rows"):
        subtree_local_attention(Tensor(q), Tensor(k), Tensor(v), build_rct_adjacency(path_graph(3), 2),
                                Tensor([1.0, 1.0]))


def test_fuse_examples():
    rng = np.random.default_rng(8)
    x, y = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    np.testing.assert_array_equal(fuse_local_global(Tensor(x), Tensor(y), 0.0).data, x)
    np.testing.assert_array_equal(fuse_local_global(Tensor(np.zeros((3, 4))), Tensor(y), 1.0).data, y)
    np.testing.assert_allclose(fuse_local_global(Tensor(2.5 * x), Tensor(2.5 * y), 0.3).data,
                               2.5 * fuse_local_global(Tensor(x), Tensor(y), 0.3).data, atol=1e-14)
    with pytest.raises(nd.ShapeError):
        fuse_local_global(Tensor(x), Tensor(np.zeros((4, 3))), 0.5)


def test_dense_equal_keys_average_v():
    v = np.array([[1.0, 2.0], [3.0, 6.0]])
    out = dense_masked_attention(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), Tensor(v), np.ones((2, 2)))
    np.testing.assert_allclose(out.data, [[2.0, 4.0], [2.0, 4.0]])


def test_dense_masked_node_gets_zero_weight():
    rng = np.random.default_rng(9)
    q, k, _ = qkv(rng, 3, 2)
    v = np.eye(3)  # output row = attention weights
    mask = np.array([[1, 0, 1], [1, 1, 1], [0, 1, 1]])
    out = dense_masked_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
    assert out[0, 1] == 0.0 and out[2, 0] == 0.0
    with pytest.raises(ValueError, match="fully masked"):
        dense_masked_attention(Tensor(q), Tensor(k), Tensor(v), np.array([[0, 0, 0], [1, 1, 1], [1, 1, 1]]))


def test_dense_matches_per_row_hand_evaluation():
    rng = np.random.default_rng(10)
    q, k, v = qkv(rng, 4, 3)
    out = dense_masked_attention(Tensor(q), Tensor(k), Tensor(v)).data
    for n in range(4):
        scores = [float(np.dot(q[n], k[m])) / np.sqrt(3) for m in range(4)]
        top = max(scores)
        w = [np.exp(s - top) for s in scores]
        total = sum(w)
        row = sum(w[m] / total * v[m] for m in range(4))
        np.testing.assert_allclose(out[n], row, atol=1e-12)


def test_dense_product_mode_keeps_masked_weight():
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    v = np.eye(2)
    out = dense_masked_attention(Tensor(q), Tensor(q), Tensor(v), np.array([[1, 0], [0, 1]]), mode="product").data
    assert out[0, 1] > 0  # e^0 survives the literal product


def test_temporal_examples():
    rng = np.random.default_rng(11)
    q, k, v = qkv(rng, 1, 3)
    np.testing.assert_allclose(temporal_attention(Tensor(q), Tensor(k), Tensor(v)).data, v)
    v = rng.standard_normal((5, 2))
    same = np.ones((5, 3))
    out = temporal_attention(Tensor(same), Tensor(same), Tensor(v), causal=False).data
    np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=0), (5, 2)), atol=1e-12)
    with pytest.raises(ValueError):
        temporal_attention(Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))))


def test_temporal_causality():
    rng = np.random.default_rng(12)
    q, k, v = qkv(rng, 6, 3, lead=(2,))
    base = temporal_attention(Tensor(q), Tensor(k), Tensor(v)).data
    t = 2
    q2, k2, v2 = q.copy(), k.copy(), v.copy()
    for arr in (q2, k2, v2):
        arr[:, t + 1:] += rng.standard_normal(arr[:, t + 1:].shape)
    moved = temporal_attention(Tensor(q2), Tensor(k2), Tensor(v2)).data
    np.testing.assert_array_equal(moved[:, :t + 1], base[:, :t + 1])
    assert not np.allclose(moved[:, t + 1:], base[:, t + 1:])


def test_local_attention_permutation_invariance():
    rng = np.random.default_rng(13)
    g = random_graph(6, 0.4, rng)
    steps, n = 3, 6
    perm = rng.permutation(n)
    q, k, v = qkv(rng, steps * n, 4)
    w = Tensor([0.2, 0.5, 0.3])
    base = subtree_local_attention(Tensor(q), Tensor(k), Tensor(v), build_rct_adjacency(g, steps), w).data
    rows = np.concatenate([t * n + perm for t in range(steps)])
    permuted = subtree_local_attention(Tensor(q[rows]), Tensor(k[rows]), Tensor(v[rows]),
                                       build_rct_adjacency(g.permuted(perm), steps), w).data
    np.testing.assert_allclose(permuted, base[rows], atol=1e-12)
    glob = global_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(global_attention(Tensor(q[rows]), Tensor(k[rows]), Tensor(v[rows])).data,
                               glob[rows], atol=1e-12)
    dense = dense_masked_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(dense_masked_attention(Tensor(q[rows]), Tensor(k[rows]), Tensor(v[rows])).data,
                               dense[rows], atol=1e-12)


def test_sim_local_attention_structure():
    rng = np.random.default_rng(14)
    g = path_graph(3)
    adj = build_sim_adjacency(g, 2)
    q, k, v = qkv(rng, 6, 3)
    out = sim_local_attention(Tensor(q), Tensor(k), Tensor(v), adj, Tensor([0.4, 0.6])).data
    mask = adj.to_dense()
    np.fill_diagonal(mask, 1.0)
    ref = dense_masked_attention(Tensor(q), Tensor(k), Tensor(v), mask).data
    np.testing.assert_allclose(out, 0.4 * v + 0.6 * ref, atol=1e-12)
    with pytest.raises(nd.ShapeError):
        sim_local_attention(Tensor(q), Tensor(k), Tensor(v), adj, Tensor([1.0, 0.0, 0.0]))


def test_attention_gradients():
    rng = np.random.default_rng(15)
    adj = build_rct_adjacency(path_graph(3), 2)
    mask = (rng.random((4, 4)) < 0.6).astype(float)
    np.fill_diagonal(mask, 1.0)
    target = rng.standard_normal((6, 2))
    cases = [
        (lambda q, k, v: nd.sum_(linear_attention(q, k, v, mask) * Tensor(target[:4])), qkv(rng, 4, 3, 2)),
        (lambda q, k, v: nd.sum_(global_attention(q, k, v) * Tensor(target[:4])), qkv(rng, 4, 3, 2)),
        (lambda q, k, v: nd.sum_(dense_masked_attention(q, k, v, mask) * Tensor(target[:4])), qkv(rng, 4, 3, 2)),
        (lambda q, k, v: nd.sum_(temporal_attention(q, k, v) * Tensor(target[:4])), qkv(rng, 4, 3, 2)),
    ]
    for fn, arrays in cases:
        # shift queries/keys away from the relu kink so differences stay on one side
        q, k, v = arrays
        q, k = np.sign(q) * (np.abs(q) + 0.2), np.sign(k) * (np.abs(k) + 0.2)
        assert grad_check(fn, [Tensor(q), Tensor(k), Tensor(v)]).passed
    q, k, v = qkv(rng, 6, 3, 2)
    q, k = np.sign(q) * (np.abs(q) + 0.2), np.sign(k) * (np.abs(k) + 0.2)
    f = lambda q, k, v, w: nd.sum_(subtree_local_attention(q, k, v, adj, w) * Tensor(target))
    assert grad_check(f, [Tensor(q), Tensor(k), Tensor(v), Tensor([0.3, 0.5, 0.2])]).passed


def test_modules_shapes_and_init():
    rng = np.random.default_rng(16)
    head = ProjectionHead(rng, 5, 4)
    q, k, v = head(Tensor(rng.standard_normal((2, 3, 5))))
    assert q.shape == k.shape == v.shape == (2, 3, 4)
    bound = 1 / np.sqrt(5)
    for p in head.parameters():
        assert np.all(np.abs(p.data) <= bound)
    w = SubtreeWeights(2)
    np.testing.assert_allclose(w.levels.data, [1 / 3] * 3)
    with pytest.raises(ValueError):
        SubtreeWeights(-1)
    g = path_graph(4)
    layer = CrossTimeAttention(rng, 5, 4, 2)
    h = Tensor(rng.standard_normal((2, 3, 4, 5)))
    assert layer(h, build_rct_adjacency(g, 3)).shape == (2, 3, 4, 4)
    assert TemporalAttention(rng, 5, 4)(h).shape == (2, 3, 4, 4)


def test_eps_constant():
    assert EPS_DEN == 1e-8
