import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgfd._errors import InvalidArgument, UndefinedCorrelation
from sgfd.decorrelation import FeatureBatch
from sgfd.envs import BanditConfig, SpuriousBandit
from sgfd.io import read_csv
from sgfd.metrics import (correlation_matrix, evaluate_return, pearson, resampled_pearson,
                          weighted_pearson)


def hand_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0, abs=1e-15)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0, abs=1e-15)
    # cov 0.5, both stds 1
    assert pearson([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-15)


def test_pearson_constant_is_undefined():
    with pytest.raises(UndefinedCorrelation):
        pearson([2.0, 2.0, 2.0], [1.0, 1.0, 1.0])
    with pytest.raises(InvalidArgument):
        pearson([1.0], [2.0])


def test_pearson_matches_hand_loop():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=40), rng.normal(size=40)
    assert pearson(x, y) == pytest.approx(hand_pearson(list(x), list(y)), abs=1e-13)


def test_weighted_pearson_uniform_identity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        n = rng.integers(2, 200)
        x, y = rng.normal(size=n), rng.normal(size=n)
        assert abs(weighted_pearson(x, y, np.ones(n)) - pearson(x, y)) <= 1e-12


def test_zero_weight_drops_sample():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=12), rng.normal(size=12)
    w = rng.uniform(0.5, 2, 12)
    w[4] = 0.0
    keep = np.arange(12) != 4
    expected = weighted_pearson(x[keep], y[keep], w[keep])
    assert weighted_pearson(x, y, w) == pytest.approx(expected, abs=1e-13)
    # and with otherwise uniform weights it is the plain coefficient on the rest
    w = np.ones(12)
    w[4] = 0.0
    assert weighted_pearson(x, y, w) == pytest.approx(pearson(x[keep], y[keep]), abs=1e-13)


def test_integer_weights_equal_row_repetition():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=8), rng.normal(size=8)
    w = rng.integers(1, 4, 8)
    assert weighted_pearson(x, y, w.astype(float)) == pytest.approx(
        pearson(np.repeat(x, w), np.repeat(y, w)), abs=1e-13)


def test_weighted_floor_and_bad_weights():
    with pytest.raises(UndefinedCorrelation):
        weighted_pearson(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 1.0]), np.array([0.0, 1.0, 0.0]))
    with pytest.raises(InvalidArgument):
        weighted_pearson(np.ones(3), np.arange(3.0), -np.ones(3))


@settings(max_examples=200)
@given(arrays(np.float64, 10, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 10, elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, 10, elements=st.floats(0, 10)))
def test_weighted_pearson_bounded(x, y, w):
    try:
        r = weighted_pearson(x, y, w)
    except (UndefinedCorrelation, InvalidArgument):
        return
    assert -1.0 <= r <= 1.0


def test_resampled_pearson_tracks_moments():
    rng = np.random.default_rng(4)
    x = rng.normal(size=4000)
    y = 0.6 * x + 0.8 * rng.normal(size=4000)
    w = rng.uniform(0, 2, 4000)
    assert resampled_pearson(x, y, w, seed=0) == pytest.approx(weighted_pearson(x, y, w), abs=0.05)


def test_independent_columns_small_correlation():
    X = np.random.default_rng(5).normal(size=(2000, 5))
    R = correlation_matrix(X).matrix
    off = R[~np.eye(5, dtype=bool)]
    # 4 sigma of the null sampling distribution ~ 4 / sqrt(n) = 0.089
    assert np.all(np.abs(off) < 0.1)


def test_matrix_contract_and_duplicated_column():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(50, 4))
    X[:, 3] = X[:, 1]
    rep = correlation_matrix(FeatureBatch(X, np.eye(2)[rng.integers(0, 2, 50)]),
                             w=rng.uniform(0.1, 2, 50), changed_feature_index=1)
    assert np.array_equal(rep.matrix, rep.matrix.T)
    assert np.array_equal(np.diag(rep.matrix), np.ones(4))
    assert rep.matrix[1, 3] == pytest.approx(1.0, abs=1e-12)
    assert rep.weighted
    expected = np.mean(np.abs(rep.matrix[1, [0, 2, 3]]))
    assert rep.summary == pytest.approx(expected)


def test_constant_column_flagged(tmp_path):
    X = np.random.default_rng(7).normal(size=(20, 3))
    X[:, 2] = 4.0
    rep = correlation_matrix(X)
    assert rep.matrix[0, 2] == 0.0 and rep.undefined[0, 2] and not rep.undefined[0, 1]
    rep.to_csv(tmp_path / "c.csv")
    rows = read_csv(tmp_path / "c.csv")
    assert [r["undefined"] for r in rows] == ["1", "1", "1"]
    assert json.dumps(rep.to_json())


def test_resample_method_differs_only_by_sampling():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(3000, 3))
    X[:, 1] += X[:, 0]
    w = rng.uniform(0.5, 1.5, 3000)
    a = correlation_matrix(X, w, method="moments").matrix
    b = correlation_matrix(X, w, method="resample", seed=1).matrix
    assert np.allclose(a, b, atol=0.06)
    with pytest.raises(InvalidArgument):
        correlation_matrix(X, w, method="bogus")


def test_evaluate_return_optimal_policy_and_shape():
    env = SpuriousBandit(3.0, BanditConfig(), [1.0, 5.0])
    rep = evaluate_return(lambda s: env.optimal_action(s), env, 10, seed=0)
    assert len(rep.returns) == 10
    assert rep.mean == 0.0 and rep.std == 0.0
    again = evaluate_return(lambda s: np.zeros(1), env, 10, seed=0)
    assert evaluate_return(lambda s: np.zeros(1), env, 10, seed=0).returns == again.returns
    with pytest.raises(InvalidArgument):
        evaluate_return(lambda s: np.zeros(1), env, 0, seed=0)
