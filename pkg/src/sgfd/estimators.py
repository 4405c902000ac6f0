"""scikit-learn compatible wrappers.

* :class:`RandomFourierFeatures` -- per-column cosine feature transformer.
* :class:`EnvironmentClassifier` -- environment-source classifier with
  ``saliency`` and ``feature_probs``.
* :class:`SaliencyGuidedReweighter` -- fits decorrelating sample weights,
  optionally guided by a classifier's saliency.

All three follow the usual estimator contract: constructor arguments are
stored untouched, ``fit`` returns ``self``, learned state ends in ``_``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from sgfd.decorrelation import DecorrConfig, FeatureBatch, optimize_weights
from sgfd.rff import apply_maps, sample_maps
from sgfd.saliency import EnvClassifier, classifier_accuracy, feature_probs, saliency_map


def _rng(random_state):
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


class RandomFourierFeatures(TransformerMixin, BaseEstimator):
    """Map each column ``j`` to ``sqrt(2) cos(omega_jm x + phase_jm)``, ``m < n_components``.

    Parameters
    ----------
    n_components : int, default=5
        Number of random functions per column.
    standardize : bool, default=True
        Standardise columns with the training mean/std before mapping.
    random_state : int, Generator or None
    """

    def __init__(self, n_components=5, standardize=True, random_state=None):
        self.n_components = n_components
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.maps_ = sample_maps(X.shape[1], self.n_components, _rng(self.random_state))
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.sqrt(np.maximum(X.var(axis=0), 1e-8))
        return self

    def transform(self, X):
        check_is_fitted(self, "maps_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if self.standardize:
            X = (X - self.mean_) / self.scale_
        return apply_maps(self.maps_, X).reshape(X.shape[0], -1)


class EnvironmentClassifier(ClassifierMixin, BaseEstimator):
    """Predict the source environment of each row.

    Trains by mini-batch Adam until the accuracy on a fresh batch exceeds
    ``accuracy_threshold`` or ``max_updates`` steps have run.
    """

    def __init__(self, hidden=128, learning_rate=3e-3, batch_size=128, max_updates=2000,
                 accuracy_threshold=0.9, random_state=None):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_updates = max_updates
        self.accuracy_threshold = accuracy_threshold
        self.random_state = random_state

    def _onehot(self, y):
        return (np.asarray(y)[:, None] == self.classes_[None, :]).astype(float)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        self.n_features_in_ = X.shape[1]
        rng = _rng(self.random_state)
        self.model_ = EnvClassifier(X.shape[1], len(self.classes_), self.hidden,
                                    self.learning_rate, seed=rng)
        Y = self._onehot(y)
        self.accuracy_curve_ = []
        n = X.shape[0]
        for _ in range(self.max_updates):
            idx = rng.integers(0, n, size=min(self.batch_size, n))
            acc = classifier_accuracy(self.model_, FeatureBatch(X[idx], Y[idx]))
            self.accuracy_curve_.append(acc)
            if acc > self.accuracy_threshold:
                self.model_.ever_passed = True
                break
            self.model_.fit_batch(X[idx], Y[idx])
        self.n_updates_ = self.model_.n_updates
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(check_array(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.model_.predict(check_array(X))]

    def saliency(self, X, y, signed=False):
        """Mean absolute (or signed) input gradient of the true-class log-probability."""
        check_is_fitted(self, "model_")
        X, y = check_X_y(X, y)
        return saliency_map(self.model_, FeatureBatch(X, self._onehot(y)), signed=signed)

    def feature_probs(self, X, y, signed=False):
        return feature_probs(self.saliency(X, y, signed))


class SaliencyGuidedReweighter(BaseEstimator):
    """Learn sample weights that decorrelate features from the changed ones.

    ``fit(X, y)`` takes states ``X`` and environment labels ``y``. With
    ``guidance="saliency"`` an :class:`EnvironmentClassifier` is trained on
    ``(X, y)``; if it passes its accuracy threshold, its saliency softmax
    weights the pairwise dependence terms. Otherwise, or with
    ``guidance="uniform"``, every pair gets the same weight. The fitted
    weights are in ``sample_weight_`` (nonnegative, summing to ``n``).
    """

    def __init__(self, n_rff=5, max_iter=10, learning_rate=1e-2, momentum=0.9,
                 weight_decay=1e-4, grad_scale="n2", cov_form="moments",
                 standardize=True, guidance="saliency", signed_saliency=False,
                 classifier=None, random_state=None):
        self.n_rff = n_rff
        self.max_iter = max_iter
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_scale = grad_scale
        self.cov_form = cov_form
        self.standardize = standardize
        self.guidance = guidance
        self.signed_saliency = signed_saliency
        self.classifier = classifier
        self.random_state = random_state

    def decorr_config(self):
        return DecorrConfig(M=self.n_rff, inner_iters=self.max_iter, lr=self.learning_rate,
                            momentum=self.momentum, weight_decay=self.weight_decay,
                            grad_scale=self.grad_scale, cov_form=self.cov_form,
                            standardize_features=self.standardize)

    def fit(self, X, y=None):
        if self.guidance not in ("saliency", "uniform"):
            raise ValueError(f"guidance must be 'saliency' or 'uniform', got {self.guidance!r}")
        if y is None:
            X = check_array(X, ensure_min_samples=2)
        else:
            X, y = check_X_y(X, y, ensure_min_samples=2)
        rng = _rng(self.random_state)
        n, d = X.shape
        self.n_features_in_ = d
        self.rff_maps_ = sample_maps(d, self.n_rff, rng)
        self.saliency_ = None
        self.classifier_ = None
        p = np.full(d, 1.0 / d)
        if self.guidance == "saliency" and y is not None and len(np.unique(y)) > 1:
            clf = clone(self.classifier) if self.classifier is not None else EnvironmentClassifier()
            if clf.random_state is None:
                clf.set_params(random_state=int(rng.integers(2 ** 31)))
            clf.fit(X, y)
            self.classifier_ = clf
            if clf.model_.ever_passed:
                self.saliency_ = clf.saliency(X, y, signed=self.signed_saliency)
                p = feature_probs(self.saliency_)
        self.feature_probs_ = p
        res = optimize_weights(X, self.rff_maps_, p, self.decorr_config(), trace=True)
        self.sample_weight_ = res.weights
        self.objective_initial_ = res.objective_initial
        self.objective_final_ = res.objective_final
        self.trace_ = res.trace
        return self

    def fit_weights(self, X, y=None):
        return self.fit(X, y).sample_weight_
