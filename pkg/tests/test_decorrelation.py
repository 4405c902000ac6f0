import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgfd._errors import InvalidArgument
from sgfd.decorrelation import (COV_FORMS, DecorrConfig, FeatureBatch, ReweightingObjective,
                                cross_cov, decorrelation_objective, frob_norm_sq,
                                objective_grad_w, optimize_weights, pair_independence,
                                permutation_null, project_weights, weighted_cross_cov,
                                weighted_moment_cross_cov)
from sgfd.rff import rff_sample, sample_maps


def loop_cross_cov(u, v):
    """Unweighted cross-covariance written out as explicit sums."""
    n, M = u.shape
    mu = [sum(u[k][a] for k in range(n)) / n for a in range(M)]
    mv = [sum(v[k][b] for k in range(n)) / n for b in range(M)]
    return np.array([[sum((u[k][a] - mu[a]) * (v[k][b] - mv[b]) for k in range(n)) / (n - 1)
                      for b in range(M)] for a in range(M)])


def loop_weighted_moment_cov(u, v, w):
    n, M = u.shape
    mu = [sum(w[k] * u[k][a] for k in range(n)) / n for a in range(M)]
    mv = [sum(w[k] * v[k][b] for k in range(n)) / n for b in range(M)]
    return np.array([[sum(w[k] * (u[k][a] - mu[a]) * (v[k][b] - mv[b]) for k in range(n)) / (n - 1)
                      for b in range(M)] for a in range(M)])


def loop_scaled_cov(u, v, w):
    return loop_cross_cov(np.asarray(w)[:, None] * u, np.asarray(w)[:, None] * v)


# --- weighted_cross_cov -------------------------------------------------------

@pytest.mark.parametrize("cov", [weighted_cross_cov, weighted_moment_cross_cov])
def test_constant_u_gives_zero(cov):
    u = np.tile([0.3, -1.0, 2.0], (5, 1))
    v = np.random.default_rng(0).normal(size=(5, 3))
    assert np.array_equal(cov(u, v, np.ones(5)), np.zeros((3, 3)))


@pytest.mark.parametrize("cov", [weighted_cross_cov, weighted_moment_cross_cov])
def test_two_sample_hand_value(cov):
    u = np.array([[math.sqrt(2)], [0.0]])
    C = cov(u, u.copy(), np.ones(2))
    assert C.shape == (1, 1)
    assert C[0, 0] == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("cov", [weighted_cross_cov, weighted_moment_cross_cov])
def test_uniform_weights_reduce_to_plain_cross_cov(cov):
    rng = np.random.default_rng(3)
    u, v = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
    C = cov(u, v, np.ones(9))
    assert np.array_equal(C, cross_cov(u, v))
    assert np.max(np.abs(C - loop_cross_cov(u, v))) < 1e-12


def test_weighted_forms_match_loop_oracles():
    rng = np.random.default_rng(4)
    u, v = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    w = project_weights(rng.uniform(0, 2, 7))
    assert np.max(np.abs(weighted_cross_cov(u, v, w) - loop_scaled_cov(u, v, w))) < 1e-12
    assert np.max(np.abs(weighted_moment_cross_cov(u, v, w) - loop_weighted_moment_cov(u, v, w))) < 1e-12


def test_cross_cov_needs_two_rows():
    with pytest.raises(InvalidArgument):
        weighted_cross_cov(np.ones((1, 2)), np.ones((1, 2)), np.ones(1))


def test_frob_norm_sq_examples():
    assert frob_norm_sq(np.zeros((3, 3))) == 0
    assert frob_norm_sq(np.eye(2)) == 2
    assert frob_norm_sq(np.array([[1, 2], [3, 4]])) == 30


# --- pair_independence ----------------------------------------------------------

def test_constant_column_scores_zero():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.full(20, 3.0), rng.normal(size=20)])
    maps = sample_maps(2, 5, 1)
    w = project_weights(rng.uniform(0, 2, 20))
    assert pair_independence(X, 0, 1, maps, w) == pytest.approx(0.0, abs=1e-20)


def test_pair_independence_rejects_same_index():
    with pytest.raises(InvalidArgument):
        pair_independence(np.ones((4, 2)), 1, 1, sample_maps(2, 3, 0))


def test_duplicated_column_exceeds_permutation_null():
    rng = np.random.default_rng(5)
    x = rng.normal(size=256)
    maps = sample_maps(2, 5, 6)
    obs, null = permutation_null(x, x.copy(), maps[0], maps[1], 1000, seed=7)
    assert obs == pytest.approx(pair_independence(np.column_stack([x, x]), 0, 1, maps), rel=1e-12)
    assert obs > np.quantile(null, 0.99)


def test_independent_pairs_sit_inside_permutation_null():
    below = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        x, y = rng.normal(size=512), rng.normal(size=512)
        mx, my = rff_sample(5, rng), rff_sample(5, rng)
        obs, null = permutation_null(x, y, mx, my, 1000, seed=rng)
        below += obs < np.quantile(null, 0.95)
    assert below >= 45


# --- objective and gradient -------------------------------------------------------

def test_objective_zero_for_identical_samples():
    X = np.tile([1.0, -2.0, 0.5], (6, 1))
    maps = sample_maps(3, 5, 0)
    p = np.full(3, 1 / 3)
    for w in (np.ones(6), project_weights(np.arange(1.0, 7.0))):
        assert decorrelation_objective(X, w, maps, p) == pytest.approx(0.0, abs=1e-20)
        assert np.max(np.abs(objective_grad_w(X, w, maps, p))) < 1e-15
    # the weight-scaled form is only flat at w = 1: w_k * u varies with k
    assert decorrelation_objective(X, np.ones(6), maps, p, form="scaled") == pytest.approx(0, abs=1e-20)
    assert decorrelation_objective(X, project_weights(np.arange(1.0, 7.0)), maps, p,
                                   form="scaled") > 0.0


def test_one_hot_p_gives_zero_objective():
    X = np.random.default_rng(1).normal(size=(10, 4))
    assert decorrelation_objective(X, np.ones(10), sample_maps(4, 5, 2), np.eye(4)[1]) == 0.0


def test_uniform_p_objective_is_scaled_pair_sum():
    X = np.random.default_rng(2).normal(size=(4, 3))
    maps = sample_maps(3, 5, 3)
    pairs = [pair_independence(X, i, j, maps) for i, j in itertools.combinations(range(3), 2)]
    value = decorrelation_objective(X, np.ones(4), maps, np.full(3, 1 / 3))
    assert abs(value - sum(pairs) / 9) < 1e-12


def test_objective_matches_pairwise_recomputation_with_weights():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(12, 4))
    maps = sample_maps(4, 5, 9)
    p = np.array([0.1, 0.4, 0.3, 0.2])
    w = project_weights(rng.uniform(0, 2, 12))
    for form in COV_FORMS:
        expected = sum(p[i] * p[j] * pair_independence(X, i, j, maps, w, form=form)
                       for i, j in itertools.combinations(range(4), 2))
        assert abs(decorrelation_objective(X, w, maps, p, form=form) - expected) < 1e-12


def finite_difference_grad(obj, w, h=1e-5):
    return np.array([(obj.value(w + h * e) - obj.value(w - h * e)) / (2 * h)
                     for e in np.eye(w.size)])


@pytest.mark.parametrize("form", COV_FORMS)
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(form, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(6, 3))
    p = rng.dirichlet(np.ones(3))
    obj = ReweightingObjective(X, sample_maps(3, 5, seed), p, form=form)
    # off the constraint set too, so the sum(w) dependence is exercised
    w = rng.uniform(0.2, 2.0, 6)
    g = obj.grad(w)
    fd = finite_difference_grad(obj, w)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_zero_features_give_zero_gradient():
    obj = ReweightingObjective(np.random.default_rng(0).normal(size=(8, 3)),
                               sample_maps(3, 5, 0), np.full(3, 1 / 3))
    obj.features = obj.features * 0.0
    assert np.all(obj.grad(np.ones(8)) == 0.0)


def test_objective_requires_two_features():
    with pytest.raises(InvalidArgument):
        decorrelation_objective(np.ones((5, 1)), np.ones(5), sample_maps(1, 5, 0), np.ones(1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_objective_nonnegative(seed):
    rng = np.random.default_rng(seed)
    n, d = rng.integers(2, 20), rng.integers(2, 6)
    X = rng.normal(size=(n, d))
    w = project_weights(rng.uniform(-1, 3, n))
    p = rng.dirichlet(np.ones(d))
    for form in COV_FORMS:
        assert decorrelation_objective(X, w, sample_maps(d, 3, seed), p, form=form) >= 0


# --- projection -------------------------------------------------------------------

def test_projection_examples():
    assert np.array_equal(project_weights([2.0, 0.0, 1.0]), [2.0, 0.0, 1.0])
    assert np.allclose(project_weights([-1.0, 2.0, 2.0]), [0.0, 1.5, 1.5], atol=1e-15)
    assert np.array_equal(project_weights([-1.0, -1.0]), [1.0, 1.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=50))
def test_projection_feasible(raw):
    w = project_weights(raw)
    assert np.all(w >= 0)
    assert abs(w.sum() - len(raw)) < 1e-9 * max(1, len(raw))


# --- optimize_weights -------------------------------------------------------------

def test_optimize_flat_objective():
    X = np.tile([0.5, 1.5], (8, 1))
    res = optimize_weights(X, sample_maps(2, 5, 0), np.array([0.5, 0.5]), trace=True)
    assert np.array_equal(res.weights, np.ones(8))
    assert all(row["objective"] == 0.0 for row in res.trace)


def test_inner_iters_contract():
    assert DecorrConfig().inner_iters == 10
    with pytest.raises(InvalidArgument):
        DecorrConfig(inner_iters=0)


@pytest.mark.parametrize("seed", range(4))
def test_optimize_approaches_grid_minimum(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=4)
    X = np.column_stack([x, x])
    maps = sample_maps(2, 5, seed)
    p = np.array([0.5, 0.5])
    obj = ReweightingObjective(X, maps, p)
    grid = [np.array([a, b, c, 20 - a - b - c]) * 0.05 * 4
            for a in range(21) for b in range(21 - a) for c in range(21 - a - b)]
    best = min(obj.value(w) for w in grid)
    res = optimize_weights(X, maps, p, DecorrConfig(inner_iters=100))
    # grid minimum is 0 (all mass on one sample), so compare against the closed gap
    assert res.objective_final - best <= 0.1 * (res.objective_initial - best)


def correlated_batch(seed, n=64, d=6):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    X[:, 1] = 0.8 * X[:, 0] + 0.6 * X[:, 1]
    return X


def test_optimize_makes_progress_on_average():
    improved = 0
    for seed in range(50):
        X = correlated_batch(seed)
        res = optimize_weights(X, sample_maps(6, 5, seed), np.full(6, 1 / 6))
        w = res.weights
        assert np.all(w >= 0) and abs(w.sum() - 64) < 1e-9
        improved += res.objective_final <= res.objective_initial
    assert improved >= 48


def test_optimize_is_permutation_equivariant():
    X = correlated_batch(3)
    maps = sample_maps(6, 5, 4)
    p = np.random.default_rng(0).dirichlet(np.ones(6))
    perm = np.random.default_rng(1).permutation(64)
    a = optimize_weights(X, maps, p, trace=True)
    b = optimize_weights(X[perm], maps, p, trace=True)
    assert np.allclose(b.weights, a.weights[perm], atol=1e-10)
    assert np.allclose([r["objective"] for r in a.trace], [r["objective"] for r in b.trace],
                       rtol=1e-10, atol=1e-14)


def test_feature_batch_validation():
    with pytest.raises(InvalidArgument):
        FeatureBatch(np.ones((3, 2)), np.array([[1, 0], [1, 1], [0, 1]]))
    with pytest.raises(InvalidArgument):
        FeatureBatch(np.array([[np.nan, 1.0]]))
