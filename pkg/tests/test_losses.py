import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualcast import ndtensor as nd
from dualcast.losses import (EPS_KL, EPS_SEP, LossWeights, dbi_components, dbi_loss, derangement,
                             environment_loss, filter_loss, prediction_loss, total_loss)
from dualcast.ndtensor import Tensor, grad_check


def kl_rows(p, q):
    return [float(sum(p[i, j] * np.log(p[i, j] / q[i, j]) for j in range(p.shape[1]))) for i in range(p.shape[0])]


def brute_dbi(z, psi, ids, eps=EPS_SEP):
    """Explicit loops over compactness, separation, ratio, worst-case and mean."""
    present = sorted(set(int(i) for i in ids))
    if len(present) < 2:
        return 0.0
    s = {}
    for p in present:
        members = [j for j in range(len(ids)) if ids[j] == p]
        total = 0.0
        for j in members:
            total += np.sqrt(sum((psi[p].flat[e] - z[j].flat[e]) ** 2 for e in range(z[j].size)))
        s[p] = total / len(members)
    d = []
    for p in present:
        worst = -np.inf
        for q in present:
            if q == p:
                continue
            sep = np.sqrt(sum((psi[p].flat[e] - psi[q].flat[e]) ** 2 for e in range(psi[p].size)))
            worst = max(worst, (s[p] + s[q]) / (sep + eps))
        d.append(worst)
    return float(np.mean(d))


# ---- filter loss

def test_filter_identical_is_clamped():
    g = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    assert filter_loss(g, g).item() == pytest.approx(1.0 / EPS_KL)


def test_filter_worked_example():
    g_i, g_e = np.log([[0.5, 0.5]]), np.log([[0.9, 0.1]])
    kl = kl_rows(np.array([[0.5, 0.5]]), np.array([[0.9, 0.1]]))[0]
    loss = filter_loss(Tensor(g_i), Tensor(g_e)).item()
    assert loss == pytest.approx(1.0 / kl, rel=1e-12)
    assert loss == pytest.approx(1.9576, abs=5e-5)


def test_filter_batch_mean():
    p = np.array([[0.5, 0.5], [0.3, 0.7]])
    q = np.array([[0.9, 0.1], [0.8, 0.2]])
    rows = kl_rows(p, q)
    assert filter_loss(Tensor(np.log(p)), Tensor(np.log(q))).item() == pytest.approx(1.0 / np.mean(rows), rel=1e-12)


def test_filter_shape_check():
    with pytest.raises(nd.ShapeError):
        filter_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


# ---- environment loss

def test_environment_examples():
    assert environment_loss(Tensor(np.ones((1, 4)))).item() == 0.0
    assert environment_loss(Tensor(np.ones((3, 4)))).item() == pytest.approx(1.0 / EPS_KL)
    p = np.array([[0.5, 0.5], [0.9, 0.1]])
    shifted = p[[1, 0]]
    mean_kl = np.mean(kl_rows(shifted, p))
    # 0.43945 is the mean of the two rounded divergences 0.36807 and 0.51083
    assert mean_kl == pytest.approx((0.36807 + 0.51083) / 2, abs=1e-5)
    loss = environment_loss(Tensor(np.log(p))).item()
    assert loss == pytest.approx(1.0 / mean_kl, rel=1e-12)
    assert loss == pytest.approx(2.2756, abs=5e-5)


def test_derangement_has_no_fixed_points():
    assert derangement(4).tolist() == [1, 2, 3, 0]
    rng = np.random.default_rng(0)
    for b in range(2, 9):
        perm = derangement(b, rng)
        assert sorted(perm.tolist()) == list(range(b))
        assert not np.any(perm == np.arange(b))


def test_environment_random_mode_is_seeded():
    g = Tensor(np.random.default_rng(1).standard_normal((5, 3)))
    a = environment_loss(g, np.random.default_rng(4)).item()
    b = environment_loss(g, np.random.default_rng(4)).item()
    assert a == b


@settings(max_examples=40, deadline=None)
@given(b=st.integers(2, 6), d=st.integers(2, 5), seed=st.integers(0, 2**31))
def test_reciprocal_losses_bounded_and_rotation_invariant(b, d, seed):
    rng = np.random.default_rng(seed)
    g_i, g_e = rng.standard_normal((b, d)), rng.standard_normal((b, d))
    f = filter_loss(Tensor(g_i), Tensor(g_e)).item()
    e = environment_loss(Tensor(g_e)).item()
    for v in (f, e):
        assert 0 < v <= 1.0 / EPS_KL
    rolled = np.roll(g_e, 2, axis=0)
    assert environment_loss(Tensor(rolled)).item() == pytest.approx(e, rel=1e-12)


# ---- DBI

def scalar_instance():
    psi = np.zeros((17, 1, 1, 1))
    psi[3] = 0.0
    psi[8] = 2.0
    z = np.array([0.5, -0.5, 2.5]).reshape(3, 1, 1, 1)
    return z, psi, [3, 3, 8]


def test_dbi_scalar_example():
    z, psi, ids = scalar_instance()
    comp = dbi_components(Tensor(z), Tensor(psi), ids)
    assert comp.patterns == [3, 8]
    np.testing.assert_allclose(comp.compactness.data, [0.5, 0.5])
    np.testing.assert_allclose(comp.separation.data[0, 1], 2.0)
    np.testing.assert_allclose(comp.ratio.data[0, 1], 1.0 / (2.0 + EPS_SEP))
    assert dbi_loss(Tensor(z), Tensor(psi), ids).item() == pytest.approx(0.5, abs=1e-8)


def test_dbi_samples_on_prototypes_is_zero():
    rng = np.random.default_rng(2)
    psi = rng.standard_normal((17, 2, 2, 2))
    ids = [0, 5, 9]
    comp = dbi_components(Tensor(psi[ids]), Tensor(psi), ids)
    np.testing.assert_array_equal(comp.compactness.data, 0)
    np.testing.assert_array_equal(comp.score.data, 0)
    assert dbi_loss(Tensor(psi[ids]), Tensor(psi), ids).item() == 0.0


def test_dbi_collided_prototypes_are_finite():
    psi = np.zeros((17, 1, 1, 1))
    z = np.array([1.0, 1.0]).reshape(2, 1, 1, 1)
    value = dbi_loss(Tensor(z), Tensor(psi), [0, 1]).item()
    assert np.isfinite(value) and value == pytest.approx(2.0 / EPS_SEP)


def test_dbi_single_pattern_is_zero():
    rng = np.random.default_rng(3)
    z, psi = rng.standard_normal((4, 1, 2, 2)), rng.standard_normal((17, 1, 2, 2))
    assert dbi_loss(Tensor(z), Tensor(psi), [6, 6, 6, 6]).item() == 0.0


@settings(max_examples=100, deadline=None)
@given(n_pat=st.integers(1, 5), n_samp=st.integers(1, 8), t=st.integers(1, 3), n=st.integers(1, 3),
       d=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_dbi_matches_brute_force(n_pat, n_samp, t, n, d, seed):
    rng = np.random.default_rng(seed)
    pool = rng.choice(17, size=n_pat, replace=False)
    ids = rng.choice(pool, size=n_samp)
    z = rng.standard_normal((n_samp, t, n, d))
    psi = rng.standard_normal((17, t, n, d))
    got = dbi_loss(Tensor(z), Tensor(psi), ids).item()
    assert abs(got - brute_dbi(z, psi, ids)) <= 1e-10
    order = rng.permutation(n_samp)
    assert dbi_loss(Tensor(z[order]), Tensor(psi), ids[order]).item() == pytest.approx(got, rel=1e-12, abs=1e-15)


def test_dbi_max_tie_goes_to_lowest_index():
    # pattern 0 sees equal ratios against patterns 1 and 2; the gradient flows to pattern 1 only
    psi = np.zeros((17, 1, 1, 2))
    psi[1, 0, 0] = [1.0, 0.0]
    psi[2, 0, 0] = [0.0, 1.0]
    psi[0, 0, 0] = [0.0, 0.0]
    z = np.array([[0.1, 0.0], [1.0, 0.1], [0.1, 1.0]]).reshape(3, 1, 1, 2)
    p = Tensor(psi, requires_grad=True)
    comp = dbi_components(Tensor(z), p, [0, 1, 2])
    r = comp.ratio.data
    assert r[0, 1] == pytest.approx(r[0, 2])
    nd.backward(comp.score[0:1].sum())
    assert np.any(p.grad[1] != 0) and np.all(p.grad[2] == 0)


# ---- prediction and total

def test_prediction_examples():
    y = np.array([3.0, 4.0])
    assert prediction_loss(Tensor(y), y).item() == 0.0
    assert prediction_loss(Tensor([0.0, 0.0]), y, 2).item() == 12.5
    assert prediction_loss(Tensor([0.0, 0.0]), y, 1).item() == 3.5
    with pytest.raises(nd.ShapeError):
        prediction_loss(Tensor([0.0]), y)


def test_total_loss_combination():
    parts = [Tensor(v) for v in (1.5, 2.0, 3.0, 4.0)]
    assert total_loss(*parts, LossWeights()).total.item() == 1.5
    w = LossWeights(alpha=0.05, beta=0.01, gamma=0.1)
    assert total_loss(*parts, w).total.item() == pytest.approx(1.5 + 0.05 * 2 + 0.01 * 3 + 0.1 * 4)
    doubled = [parts[0], Tensor(4.0), parts[2], parts[3]]
    delta = total_loss(*doubled, w).total.item() - total_loss(*parts, w).total.item()
    assert delta == pytest.approx(0.05 * 2.0)
    assert set(total_loss(*parts, w).as_floats()) == {"l_pred", "l_flt", "l_env", "l_dbi", "total"}


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)
    with pytest.raises(ValueError):
        LossWeights(p_norm=3)


def test_loss_gradients():
    rng = np.random.default_rng(5)
    g_i, g_e = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
    assert grad_check(filter_loss, [g_i, g_e]).passed
    assert grad_check(environment_loss, [Tensor(rng.standard_normal((4, 3)))]).passed
    z, psi, ids = scalar_instance()
    assert grad_check(lambda z, p: dbi_loss(z, p, ids), [Tensor(z), Tensor(psi)]).passed
    z = rng.standard_normal((6, 2, 2, 2))
    psi = rng.standard_normal((17, 2, 2, 2))
    ids = [0, 0, 4, 4, 9, 12]
    assert grad_check(lambda z, p: dbi_loss(z, p, ids), [Tensor(z), Tensor(psi)]).passed
    pred, target = rng.standard_normal((2, 3, 2, 1)), rng.standard_normal((2, 3, 2, 1))
    assert grad_check(lambda x: prediction_loss(x, target, 2), [Tensor(pred)]).passed
    assert grad_check(lambda x: prediction_loss(x, target, 1), [Tensor(pred)]).passed
