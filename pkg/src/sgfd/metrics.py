"""Pearson correlation (plain and sample-weighted) and return evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sgfd._errors import InvalidArgument, UndefinedCorrelation
from sgfd.io import write_csv

WEIGHTED_VAR_FLOOR = 1e-12


def pearson(x, y):
    """Sample Pearson coefficient, clamped to ``[-1, 1]``.

    Raises :class:`UndefinedCorrelation` if either input is constant.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise InvalidArgument("pearson needs two equal-length vectors with n >= 2")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = np.dot(dx, dx)
    syy = np.dot(dy, dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelation("correlation undefined for a constant input")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def weighted_pearson(x, y, w):
    """Pearson coefficient from weighted first and second moments.

    Means are ``sum(w x) / sum(w)``; the covariance and variances use the
    same normalisation, which cancels in the ratio.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if not (x.shape == y.shape == w.shape) or x.ndim != 1 or x.size < 2:
        raise InvalidArgument("weighted_pearson needs equal-length vectors with n >= 2")
    if np.any(w < 0) or w.sum() <= 0:
        raise InvalidArgument("weights must be nonnegative with positive sum")
    q = w / w.sum()
    dx = x - np.dot(q, x)
    dy = y - np.dot(q, y)
    vx = np.dot(q, dx * dx)
    vy = np.dot(q, dy * dy)
    if vx < WEIGHTED_VAR_FLOOR or vy < WEIGHTED_VAR_FLOOR:
        raise UndefinedCorrelation("weighted variance below floor")
    return float(np.clip(np.dot(q, dx * dy) / np.sqrt(vx * vy), -1.0, 1.0))


def resampled_pearson(x, y, w, seed=None, size=None):
    """Pearson on a weight-proportional bootstrap resample of the rows."""
    w = np.asarray(w, dtype=float)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(w.size, size=size or w.size, replace=True, p=w / w.sum())
    return pearson(np.asarray(x)[idx], np.asarray(y)[idx])


@dataclass
class CorrelationReport:
    matrix: np.ndarray
    undefined: np.ndarray
    weighted: bool
    changed_feature_index: int | None = None

    @property
    def summary(self):
        """Mean ``|rho|`` between the changed feature and every other feature."""
        if self.changed_feature_index is None:
            return None
        c = self.changed_feature_index
        others = [j for j in range(self.matrix.shape[0]) if j != c]
        return float(np.mean(np.abs(self.matrix[c, others])))

    def to_csv(self, path):
        d = self.matrix.shape[0]
        names = [f"z{j}" for j in range(d)]
        rows = []
        for i in range(d):
            row = {"feature": names[i]}
            row.update({names[j]: f"{self.matrix[i, j]:.17g}" for j in range(d)})
            row["undefined"] = int(self.undefined[i].any())
            rows.append(row)
        write_csv(path, ["feature", *names, "undefined"], rows)

    def to_json(self):
        return {"weighted": self.weighted, "changed_feature_index": self.changed_feature_index,
                "summary": self.summary, "undefined_pairs": int(self.undefined.sum() // 2)}


def correlation_matrix(batch, w=None, changed_feature_index=None, method="moments", seed=None):
    """All pairwise (weighted) Pearson coefficients of the columns of ``batch``.

    Undefined pairs (a constant column) are recorded as 0 and flagged in
    ``undefined``. ``method="resample"`` estimates weighted correlations on
    a weight-proportional resample instead of weighted moments.
    """
    X = batch.values if hasattr(batch, "values") else np.asarray(batch, dtype=float)
    n, d = X.shape
    if n < 2:
        raise InvalidArgument("correlation_matrix needs n >= 2")
    if method not in ("moments", "resample"):
        raise InvalidArgument(f"unknown method {method!r}")
    if w is not None and method == "resample":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        w = np.asarray(w, dtype=float)
        X = X[rng.choice(n, size=n, replace=True, p=w / w.sum())]
        w = None
    R = np.eye(d)
    undefined = np.zeros((d, d), dtype=bool)
    for i in range(d):
        for j in range(i + 1, d):
            try:
                if w is None:
                    r = pearson(X[:, i], X[:, j])
                else:
                    r = weighted_pearson(X[:, i], X[:, j], w)
            except UndefinedCorrelation:
                r = 0.0
                undefined[i, j] = undefined[j, i] = True
            R[i, j] = R[j, i] = r
    return CorrelationReport(R, undefined, w is not None, changed_feature_index)


@dataclass
class ReturnReport:
    returns: list
    mean: float
    std: float


def evaluate_return(policy, env, episodes, seed):
    """Roll out ``policy(state) -> action`` for ``episodes`` episodes.

    ``policy`` is any callable; pass ``agent.deterministic_policy`` to
    evaluate an agent. Episode ``e`` resets the environment with a seed
    derived from ``(seed, e)``; ``seed`` may be an int or a sequence of ints.
    """
    if episodes < 1:
        raise InvalidArgument("episodes must be >= 1")
    key = [int(v) for v in np.ravel([seed])]
    returns = []
    for e in range(episodes):
        s = env.reset(seed=[*key, e])
        total, done = 0.0, False
        while not done:
            s, r, done = env.step(policy(s))
            total += r
        returns.append(total)
    arr = np.array(returns)
    return ReturnReport(returns, float(arr.mean()), float(arr.std()))
