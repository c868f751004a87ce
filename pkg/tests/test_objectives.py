import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progcl.autodiff import Tensor
from progcl.nn import ProjectionParams
from progcl.objectives import (MixingPlan, PairSimilarities, compute_weights, hard_pool,
                               loss_infonce, loss_progcl_mix, loss_progcl_weight, mixing_plan,
                               synthesize_negatives, synthetic_similarities)

from .helpers import grad_case, scalar_infonce


def _random_sims(rng, n, tau=0.5):
    zu = rng.standard_normal((n, 4))
    zv = zu + 0.5 * rng.standard_normal((n, 4))
    return PairSimilarities.from_projections(Tensor(zu), Tensor(zv), tau)


def _arrays(sims):
    return sims.inter.data, sims.intra_u.data, sims.intra_v.data


def test_uniform_two_nodes_gives_log3():
    sims = PairSimilarities(np.full((2, 2), 0.3), np.full((2, 2), 0.3), np.full((2, 2), 0.3), 0.5)
    assert loss_infonce(sims).item() == pytest.approx(math.log(3), abs=1e-12)


@pytest.mark.parametrize("n", [2, 5, 9])
def test_infinite_temperature_counts_terms(n):
    sims = _random_sims(np.random.default_rng(n), n, tau=1e6)
    assert loss_infonce(sims).item() == pytest.approx(math.log(2 * n - 1), abs=1e-5)


def test_infonce_matches_scalar_oracle():
    sims = _random_sims(np.random.default_rng(0), 3)
    assert loss_infonce(sims).item() == pytest.approx(scalar_infonce(*_arrays(sims), 0.5), abs=1e-12)


def test_temperature_and_size_validation():
    with pytest.raises(ValueError, match="positive"):
        PairSimilarities(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)), 0.0)
    with pytest.raises(ValueError, match="two nodes"):
        loss_infonce(PairSimilarities(np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), 1.0))


def test_constant_inputs_give_unit_weights():
    w = compute_weights(np.full((4, 4), 0.4), np.full((4, 4), 0.7)).w
    np.testing.assert_allclose(w[~np.eye(4, dtype=bool)], 1.0, atol=1e-15)
    assert np.all(np.diag(w) == 0)


def test_unit_posterior_is_similarity_weighting():
    s = np.random.default_rng(1).uniform(0.01, 1, (5, 5))
    w = compute_weights(s, 1.0).w
    for i in range(5):
        others = [k for k in range(5) if k != i]
        mean = np.mean(s[i, others])
        np.testing.assert_allclose(w[i, others], s[i, others] / mean, rtol=1e-13)


def test_four_anchor_hand_table():
    s = [[Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(3, 4)],
         [Fraction(1, 5), Fraction(1), Fraction(2, 5), Fraction(3, 5)],
         [Fraction(9, 10), Fraction(1, 10), Fraction(1), Fraction(1, 2)],
         [Fraction(1, 3), Fraction(2, 3), Fraction(1, 6), Fraction(1)]]
    p = [[Fraction(1), Fraction(4, 5), Fraction(1, 2), Fraction(1, 10)],
         [Fraction(1, 2), Fraction(1), Fraction(1, 2), Fraction(1, 2)],
         [Fraction(0), Fraction(1), Fraction(1), Fraction(3, 10)],
         [Fraction(7, 10), Fraction(1, 5), Fraction(9, 10), Fraction(1)]]
    expected = np.zeros((4, 4))
    for i in range(4):
        norm = sum(p[i][j] * s[i][j] for j in range(4) if j != i) / 3
        for k in range(4):
            if k != i:
                expected[i, k] = float(p[i][k] * s[i][k] / norm)
    got = compute_weights(np.array(s, dtype=float), np.array(p, dtype=float)).w
    np.testing.assert_allclose(got, expected, atol=1e-12, rtol=0)


def test_underflow_row_gets_unit_weights():
    s = np.full((3, 3), 0.5)
    p = np.ones((3, 3))
    p[1] = 0.0
    res = compute_weights(s, p)
    assert res.underflow_rows == [1]
    np.testing.assert_array_equal(res.w[1], [1.0, 0.0, 1.0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 16), st.floats(1e-3, 1e3))
def test_weight_rows_mean_one_and_scale_invariant(seed, n, c):
    rng = np.random.default_rng(seed)
    s = rng.uniform(1e-4, 1, (n, n))
    p = rng.uniform(0, 1, (n, n))
    w = compute_weights(s, p).w
    off = ~np.eye(n, dtype=bool)
    np.testing.assert_allclose(w[off].reshape(n, n - 1).mean(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(compute_weights(s, c * p).w, w, rtol=1e-12, atol=1e-12)


def test_unit_weights_reduce_to_infonce():
    sims = _random_sims(np.random.default_rng(2), 6)
    assert loss_progcl_weight(sims, np.ones((6, 6))).item() == pytest.approx(
        loss_infonce(sims).item(), abs=1e-12)


def test_single_weighted_negative_hand_value():
    n, tau, i, k = 4, 0.5, 1, 3
    sims = _random_sims(np.random.default_rng(3), n, tau)
    inter, iu, iv = _arrays(sims)
    w = np.ones((n, n))
    w[i] = 0.0
    w[i, k] = n - 1
    e = np.exp
    fwd_i = inter[i, i] / tau - np.log(e(inter[i, i] / tau)
                                       + (n - 1) * (e(inter[i, k] / tau) + e(iu[i, k] / tau)))
    rest = 0.0
    for a in range(n):
        off = [b for b in range(n) if b != a]
        rev = e(inter[a, a] / tau) + sum(e(inter[b, a] / tau) + e(iv[a, b] / tau) for b in off)
        rest += inter[a, a] / tau - np.log(rev)
        if a != i:
            f = e(inter[a, a] / tau) + sum(e(inter[a, b] / tau) + e(iu[a, b] / tau) for b in off)
            rest += inter[a, a] / tau - np.log(f)
    hand = -(fwd_i + rest) / (2 * n)
    got = loss_progcl_weight(sims, w, np.ones((n, n))).item()
    assert got == pytest.approx(hand, abs=1e-12)


def test_weighted_matches_scalar_oracle():
    rng = np.random.default_rng(4)
    sims = _random_sims(rng, 3)
    w, wr = rng.uniform(0, 2, (3, 3)), rng.uniform(0, 2, (3, 3))
    got = loss_progcl_weight(sims, w, wr).item()
    assert got == pytest.approx(scalar_infonce(*_arrays(sims), 0.5, w=w, w_rev=wr), abs=1e-12)


def test_negative_weights_rejected():
    sims = _random_sims(np.random.default_rng(5), 3)
    with pytest.raises(ValueError, match="negative"):
        loss_progcl_weight(sims, -np.ones((3, 3)))


def test_zero_synthetics_reduce_to_infonce():
    sims = _random_sims(np.random.default_rng(6), 5)
    got = loss_progcl_mix(sims, np.zeros((5, 0)), np.zeros((5, 0))).item()
    assert got == pytest.approx(loss_infonce(sims).item(), abs=1e-12)


def test_mix_matches_scalar_oracle():
    rng = np.random.default_rng(7)
    sims = _random_sims(rng, 3)
    su, sv = rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, (3, 2))
    got = loss_progcl_mix(sims, su, sv).item()
    assert got == pytest.approx(scalar_infonce(*_arrays(sims), 0.5, synth_u=su, synth_v=sv),
                                abs=1e-12)


def test_duplicated_negative_counts_twice():
    rng = np.random.default_rng(8)
    n, k = 4, 2
    u, v = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    sims = PairSimilarities.from_projections(Tensor(u), Tensor(v), 0.5)
    anchors = [i for i in range(n)]
    parent = np.array([[k if i != k else 0] for i in anchors])
    plan = MixingPlan(parent, parent.copy(), np.ones((n, 1)))
    head = ProjectionParams.identity(3)
    su = synthetic_similarities(Tensor(u), Tensor(v), plan, head)
    inter = sims.inter.data
    np.testing.assert_allclose(su.data[:, 0], inter[np.arange(n), parent[:, 0]], atol=1e-14)
    got = loss_progcl_mix(sims, su, None).item()
    extra = [[inter[i, parent[i, 0]]] for i in anchors]
    assert got == pytest.approx(scalar_infonce(*_arrays(sims), 0.5, synth_u=extra), abs=1e-12)


def test_equal_posteriors_give_midpoints():
    rng = np.random.default_rng(9)
    v = rng.standard_normal((6, 3))
    out = synthesize_negatives(0, v, rng.random(6), np.full(6, 0.4), 3, 5, rng)
    np.testing.assert_array_equal(out.alpha, 0.5)
    np.testing.assert_allclose(out.vectors, 0.5 * (v[out.p] + v[out.q]), atol=1e-15)
    assert np.all(out.p != out.q)


def test_posterior_ratio_sets_alpha():
    v = np.eye(3)
    post = np.array([0.0, 0.9, 0.1])
    hard = np.array([0.0, 2.0, 1.0])
    out = synthesize_negatives(0, v, hard, post, 2, 20, np.random.default_rng(0))
    for a, p, q in zip(out.alpha, out.p, out.q):
        assert a == pytest.approx(post[p] / (post[p] + post[q]), abs=1e-15)
        assert a in (pytest.approx(0.9), pytest.approx(0.1))
    idx = np.nonzero(out.p == 1)[0][0]
    np.testing.assert_allclose(out.vectors[idx], 0.9 * v[1] + 0.1 * v[2], atol=1e-15)


def test_both_zero_posteriors_flagged():
    out = synthesize_negatives(0, np.eye(4), np.array([0, 3, 2, 1.0]), np.zeros(4), 2, 4,
                               np.random.default_rng(0))
    assert out.both_zero == 4 and np.all(out.alpha == 0.5)


def test_pool_matches_sort_oracle():
    hard = np.array([[0.0, 0.3, 0.9, 0.3],
                     [0.5, 0.0, 0.1, 0.7],
                     [0.2, 0.2, 0.0, 0.2],
                     [0.4, 0.6, 0.5, 0.0]])
    got = hard_pool(hard, 3)
    for i in range(4):
        oracle = sorted((k for k in range(4) if k != i), key=lambda k: (-hard[i, k], k))[:3]
        assert got[i].tolist() == oracle
    with pytest.raises(ValueError):
        hard_pool(hard, 1)
    with pytest.raises(ValueError):
        hard_pool(hard, 4)


def test_mixing_plan_draws_from_pool():
    rng = np.random.default_rng(10)
    hard, post = rng.random((8, 8)), rng.random((8, 8))
    plan = mixing_plan(hard, post, 3, 50, rng)
    pool = hard_pool(hard, 3)
    for i in range(8):
        assert set(plan.p[i]) | set(plan.q[i]) <= set(pool[i])
        assert np.all(plan.p[i] != plan.q[i])
    assert np.all((plan.alpha >= 0) & (plan.alpha <= 1))
    assert mixing_plan(hard, post, 3, 0, rng).m == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10))
def test_losses_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    u, v = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    w, wr = rng.uniform(0, 2, (n, n)), rng.uniform(0, 2, (n, n))
    su, sv = rng.uniform(-1, 1, (n, 2)), rng.uniform(-1, 1, (n, 2))
    perm = rng.permutation(n)

    def losses(u, v, w, wr, su, sv):
        sims = PairSimilarities.from_projections(Tensor(u), Tensor(v), 0.5)
        return (loss_infonce(sims).item(), loss_progcl_weight(sims, w, wr).item(),
                loss_progcl_mix(sims, su, sv).item())
    base = losses(u, v, w, wr, su, sv)
    pw = w[np.ix_(perm, perm)]
    pwr = wr[np.ix_(perm, perm)]
    moved = losses(u[perm], v[perm], pw, pwr, su[perm], sv[perm])
    np.testing.assert_allclose(moved, base, atol=1e-10, rtol=0)


@pytest.mark.parametrize("kind", ["base", "weight", "mix"])
@pytest.mark.parametrize("seed", range(10))
def test_loss_gradients(kind, seed):
    assert grad_case(seed, kind) < 1e-4
