"""Environment-source classifier, its accuracy gate, and feature saliency.

A classifier learns which training environment a state came from. Once it
separates the environments, the input gradient of its log-probability for
the true environment shows which features changed across environments;
a softmax over those saliencies gives the per-feature probabilities that
weight the decorrelation objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sgfd._errors import DivergenceError, InvalidArgument
from sgfd.nn import Adam, Mlp, cross_entropy, log_softmax, softmax


@dataclass
class ClassifierGate:
    warmup_steps: int = 1000
    accuracy_threshold: float = 0.9
    max_inner_iters: int = 10

    def __post_init__(self):
        if self.warmup_steps < 0 or self.max_inner_iters < 1:
            raise InvalidArgument("warmup_steps >= 0 and max_inner_iters >= 1 required")
        if not 0 < self.accuracy_threshold <= 1:
            raise InvalidArgument("accuracy_threshold must lie in (0, 1]")


class EnvClassifier:
    """MLP ``d -> hidden -> K`` with a softmax head, trained by Adam."""

    def __init__(self, d, K, hidden=128, lr=3e-3, seed=0):
        if K < 1:
            raise InvalidArgument("K must be >= 1")
        self.net = Mlp([d, hidden, K], "relu", "identity", seed=seed)
        self.optimizer = Adam(lr=lr)
        self.ever_passed = False
        self.n_updates = 0

    @property
    def d(self):
        return self.net.layer_sizes[0]

    @property
    def K(self):
        return self.net.layer_sizes[-1]

    def predict_proba(self, X):
        return softmax(self.net.forward(X))

    def predict(self, X):
        # argmax ties resolve to the lowest class index
        return np.argmax(self.net.forward(X), axis=-1)

    def loss_and_grads(self, X, Y):
        """Mean cross-entropy and its parameter gradients."""
        logits, cache = self.net.forward_cache(X)
        probs = softmax(logits)
        loss = cross_entropy(probs, Y)
        grads, _ = self.net.backward_cache(cache, (probs - Y) / X.shape[0])
        return loss, grads

    def fit_batch(self, X, Y):
        loss, grads = self.loss_and_grads(X, Y)
        if not np.isfinite(loss):
            raise DivergenceError("classifier loss is not finite")
        self.optimizer.step(self.net.params, grads)
        self.n_updates += 1
        return loss


def classifier_accuracy(clf, batch):
    """Fraction of samples whose argmax class is the labelled environment."""
    if batch.n == 0:
        raise InvalidArgument("empty batch")
    if batch.env_labels.shape[1] != clf.K:
        raise InvalidArgument("label dimension does not match classifier")
    return float(np.mean(clf.predict(batch.values) == batch.env_index))


@dataclass
class GateReport:
    accuracy: float
    did_update: bool
    iterations: int
    losses: list = field(default_factory=list)


def classifier_update(clf, sampler, gate, global_step):
    """Gated classifier training for one outer step.

    Up to ``gate.max_inner_iters`` times: draw a fresh batch from
    ``sampler()``, measure accuracy on it, and stop if the warmup has not
    elapsed or accuracy exceeds the threshold; otherwise take one Adam
    step of cross-entropy on that batch.
    """
    accuracy = float("nan")
    losses = []
    iterations = 0
    for _ in range(gate.max_inner_iters):
        if global_step < gate.warmup_steps:
            break
        batch = sampler()
        accuracy = classifier_accuracy(clf, batch)
        if accuracy > gate.accuracy_threshold:
            clf.ever_passed = True
            break
        losses.append(clf.fit_batch(batch.values, batch.env_labels))
        iterations += 1
    return GateReport(accuracy, iterations > 0, iterations, losses)


def saliency_map(clf, batch, signed=False):
    """Batch-mean input gradient of ``log f(Z)[true env]``.

    With ``signed=False`` the absolute per-sample gradients are averaged.
    """
    X = batch.values
    if X.shape[0] == 0:
        raise InvalidArgument("empty batch")
    logits, cache = clf.net.forward_cache(X)
    upstream = batch.env_labels - softmax(logits)
    _, input_grad = clf.net.backward_cache(cache, upstream)
    if signed:
        return input_grad.mean(axis=0)
    return np.abs(input_grad).mean(axis=0)


def feature_probs(m):
    """Softmax of saliencies."""
    return softmax(np.asarray(m, dtype=float))


def true_class_log_prob(clf, X, Y):
    """Per-sample ``log f(X)[true class]``; handy as a finite-difference target."""
    return np.sum(log_softmax(clf.net.forward(X)) * Y, axis=-1)
