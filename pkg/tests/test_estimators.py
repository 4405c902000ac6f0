import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sgfd.envs import shifted_feature_dataset
from sgfd.estimators import EnvironmentClassifier, RandomFourierFeatures, SaliencyGuidedReweighter
from sgfd.rff import apply_maps


def labelled(seed=0, n=300, shift=4.0):
    X, Y = shifted_feature_dataset(3, 4, 2, shift, n, seed)
    return X, Y.argmax(1)


def test_params_round_trip_through_clone():
    est = SaliencyGuidedReweighter(n_rff=3, max_iter=4, random_state=7)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert clone(RandomFourierFeatures(n_components=2)).get_params()["n_components"] == 2


def test_rff_transform_matches_maps():
    X = np.random.default_rng(0).normal(loc=3.0, scale=2.0, size=(50, 3))
    rff = RandomFourierFeatures(n_components=4, random_state=1).fit(X)
    Z = rff.transform(X)
    assert Z.shape == (50, 12)
    expected = apply_maps(rff.maps_, (X - X.mean(0)) / X.std(0)).reshape(50, -1)
    assert np.allclose(Z, expected, atol=1e-12)
    raw = RandomFourierFeatures(n_components=4, standardize=False, random_state=1).fit(X)
    assert np.allclose(raw.transform(X), apply_maps(raw.maps_, X).reshape(50, -1))


def test_rff_rejects_unfitted_and_wrong_width():
    with pytest.raises(NotFittedError):
        RandomFourierFeatures().transform(np.ones((2, 2)))
    rff = RandomFourierFeatures().fit(np.random.default_rng(0).normal(size=(10, 3)))
    with pytest.raises(ValueError):
        rff.transform(np.ones((2, 4)))


def test_classifier_with_string_labels():
    X, y = labelled()
    names = np.array(["left", "mid", "right"])[y]
    clf = EnvironmentClassifier(random_state=0).fit(X, names)
    assert set(clf.classes_) == {"left", "mid", "right"}
    assert clf.model_.ever_passed
    # training stops at the first batch above 0.9, so the full-set score can sit just under it
    assert clf.score(X, names) > 0.85
    assert clf.predict_proba(X[:5]).shape == (5, 3)
    p = clf.feature_probs(X, names)
    assert np.argmax(p) == 2 and p.sum() == pytest.approx(1.0)


def test_reweighter_weight_contract():
    X, y = labelled(1, n=100)
    est = SaliencyGuidedReweighter(random_state=0).fit(X, y)
    w = est.sample_weight_
    assert w.shape == (300,) and np.all(w >= 0)
    assert w.sum() == pytest.approx(300)
    assert est.objective_final_ <= est.objective_initial_
    assert est.classifier_ is not None and np.argmax(est.feature_probs_) == 2


def test_uniform_guidance_and_missing_labels_give_uniform_probs():
    X, y = labelled(2, n=60)
    for est in (SaliencyGuidedReweighter(guidance="uniform", random_state=0).fit(X, y),
                SaliencyGuidedReweighter(random_state=0).fit(X)):
        assert np.array_equal(est.feature_probs_, np.full(4, 0.25))
        assert est.classifier_ is None


def test_reweighter_seeded():
    X, y = labelled(3, n=60)
    a = SaliencyGuidedReweighter(random_state=5).fit_weights(X, y)
    b = SaliencyGuidedReweighter(random_state=5).fit_weights(X, y)
    assert np.array_equal(a, b)


def test_invalid_guidance_raises():
    X, y = labelled(4, n=20)
    with pytest.raises(ValueError):
        SaliencyGuidedReweighter(guidance="oracle").fit(X, y)
