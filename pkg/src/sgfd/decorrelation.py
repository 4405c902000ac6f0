"""Sample reweighting that removes dependence between feature columns.

Dependence between columns ``i`` and ``j`` is scored by the squared
Frobenius norm of the cross-covariance of their random Fourier features.
Sample weights ``w`` (``sum(w) == n``) are fitted by projected SGD on a
probability-weighted sum of pair scores.

Two weighted covariances are available. ``"scaled"`` multiplies each
sample's features by its weight before taking an ordinary covariance.
``"moments"`` (the default for fitting) weights each sample's outer
product of deviations from the weighted mean. Both reduce to the plain
covariance at ``w == 1``; only the second drives weighted correlations
down when minimised, because scaling features by ``w`` lets the variance
of ``w`` itself masquerade as dependence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from sgfd._errors import DivergenceError, InvalidArgument
from sgfd.rff import apply_maps, rff_apply

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-8
COV_FORMS = ("moments", "scaled")


@dataclass
class FeatureBatch:
    """``n x d`` feature values plus one-hot environment labels ``n x K``."""

    values: np.ndarray
    env_labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidArgument("values must be a 2-d array")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("feature values must be finite")
        if self.env_labels is not None:
            E = np.asarray(self.env_labels, dtype=float)
            if E.ndim != 2 or E.shape[0] != self.values.shape[0]:
                raise InvalidArgument("env_labels must be n x K")
            if not (np.all((E == 0) | (E == 1)) and np.all(E.sum(axis=1) == 1)):
                raise InvalidArgument("env_labels rows must be one-hot")
            self.env_labels = E

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]

    @property
    def env_index(self):
        return np.argmax(self.env_labels, axis=1)

    def take(self, idx):
        E = None if self.env_labels is None else self.env_labels[idx]
        return FeatureBatch(self.values[idx], E)


@dataclass
class DecorrConfig:
    """Hyperparameters of the weight optimisation.

    ``lr``, ``momentum`` and ``weight_decay`` default to the SGD settings
    used for sample reweighting; ``grad_scale`` multiplies the raw
    gradient before the SGD update (see :func:`optimize_weights`).
    """

    M: int = 5
    inner_iters: int = 10
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_scale: str = "n2"
    cov_form: str = "moments"
    standardize_features: bool = True
    nonnegative: bool = True

    def __post_init__(self):
        if self.M < 1:
            raise InvalidArgument("M must be >= 1")
        if self.inner_iters < 1:
            raise InvalidArgument("inner_iters must be >= 1")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise InvalidArgument("invalid SGD settings for weight optimisation")
        if self.grad_scale not in ("none", "n", "n2"):
            raise InvalidArgument(f"grad_scale must be none, n or n2, got {self.grad_scale!r}")
        if self.cov_form not in COV_FORMS:
            raise InvalidArgument(f"cov_form must be one of {COV_FORMS}")


def _check_weights(w, n):
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise InvalidArgument(f"weights must have shape ({n},), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidArgument("weights must be finite")
    return w


def cross_cov(u_feats, v_feats):
    """Unweighted cross-covariance ``(1/(n-1)) sum_k (u_k - mean u)^T (v_k - mean v)``."""
    u, v, n = _check_pair(u_feats, v_feats)
    du = u - u.sum(axis=0) / n
    dv = v - v.sum(axis=0) / n
    return du.T @ dv / (n - 1)


def _check_pair(u_feats, v_feats):
    u = np.asarray(u_feats, dtype=float)
    v = np.asarray(v_feats, dtype=float)
    if u.shape[0] < 2:
        raise InvalidArgument("cross-covariance needs n >= 2")
    if v.shape[0] != u.shape[0]:
        raise InvalidArgument("u and v row counts differ")
    return u, v, u.shape[0]


def weighted_moment_cross_cov(u_feats, v_feats, w):
    """``(1/(n-1)) sum_k w_k (u_k - mean_w u)^T (v_k - mean_w v)``.

    ``mean_w u = (1/n) sum_k w_k u_k``, a proper weighted mean on the
    feasible set ``sum(w) = n``.
    """
    u, v, n = _check_pair(u_feats, v_feats)
    w = _check_weights(w, n)
    du = u - (w[:, None] * u).sum(axis=0) / n
    dv = v - (w[:, None] * v).sum(axis=0) / n
    return (w[:, None] * du).T @ dv / (n - 1)


def weighted_cross_cov(u_feats, v_feats, w):
    """Cross-covariance of the weight-scaled features ``w_k u_k`` and ``w_k v_k``.

    The means are ``(1/n) sum_k w_k u_k``. With ``w == 1`` this performs the
    same floating-point operations as :func:`cross_cov`.
    """
    u, v, n = _check_pair(u_feats, v_feats)
    w = _check_weights(w, n)
    wu = w[:, None] * u
    wv = w[:, None] * v
    du = wu - wu.sum(axis=0) / n
    dv = wv - wv.sum(axis=0) / n
    return du.T @ dv / (n - 1)


def frob_norm_sq(matrix):
    m = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(m)):
        raise InvalidArgument("matrix must be finite")
    return float(np.sum(m * m))


def standardize(X):
    """Column-wise zero mean, unit variance; near-constant columns map to 0."""
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=0)
    var = X.var(axis=0)
    return (X - mu) / np.sqrt(np.maximum(var, VAR_FLOOR))


def _values(batch):
    return batch.values if isinstance(batch, FeatureBatch) else np.asarray(batch, dtype=float)


def pair_independence(batch, i, j, maps, w=None, standardize_features=True, form="moments"):
    """Dependence score ``||C_w(u(Z_i), v(Z_j))||_F^2`` for one column pair."""
    X = _values(batch)
    d = X.shape[1]
    if i == j:
        raise InvalidArgument("pair_independence needs two distinct features")
    if not (0 <= i < d and 0 <= j < d):
        raise InvalidArgument("feature index out of range")
    if standardize_features:
        X = standardize(X)
    w = np.ones(X.shape[0]) if w is None else w
    u = rff_apply(maps[i], X[:, i])
    v = rff_apply(maps[j], X[:, j])
    cov = weighted_moment_cross_cov if form == "moments" else weighted_cross_cov
    return frob_norm_sq(cov(u, v, w))


def permutation_null(x, y, map_x, map_y, n_perm=1000, seed=None, standardize_features=True):
    """Observed score and its null distribution from shuffling ``y``.

    Returns ``(observed, null)`` with ``null`` of length ``n_perm``.
    """
    X = np.column_stack([x, y]).astype(float)
    if standardize_features:
        X = standardize(X)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = X.shape[0]
    u = rff_apply(map_x, X[:, 0])
    v = rff_apply(map_y, X[:, 1])
    du = u - u.mean(axis=0)
    dv = v - v.mean(axis=0)
    observed = float(np.sum((du.T @ dv / (n - 1)) ** 2))
    perms = np.argsort(rng.random((n_perm, n)), axis=1)
    C = np.einsum("ka,pkb->pab", du, dv[perms]) / (n - 1)
    return observed, np.sum(C * C, axis=(1, 2))


def _pair_mask(p, M):
    """``(dM, dM)`` matrix holding ``p_i p_j`` on off-diagonal feature blocks."""
    outer = np.outer(p, p)
    np.fill_diagonal(outer, 0.0)
    return np.kron(outer, np.ones((M, M)))


def _check_probs(p, d):
    p = np.asarray(p, dtype=float)
    if p.shape != (d,):
        raise InvalidArgument(f"p must have shape ({d},)")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidArgument("p must be a probability vector")
    return p


class ReweightingObjective:
    """Precomputed RFF features of a batch for repeated objective evaluations.

    ``value(w)`` is ``sum_{i<j} p_i p_j ||C_w(u(Z_i), v(Z_j))||_F^2`` and
    ``grad(w)`` its exact gradient in ``w`` (maps and ``p`` held fixed),
    where ``C_w`` is the ``form`` covariance.
    """

    def __init__(self, batch, maps, p, standardize_features=True, form="moments"):
        X = _values(batch)
        n, d = X.shape
        if d < 2:
            raise InvalidArgument("need at least two features")
        if n < 2:
            raise InvalidArgument("need at least two samples")
        if len(maps) != d:
            raise InvalidArgument("need one RFF map per feature")
        if form not in COV_FORMS:
            raise InvalidArgument(f"form must be one of {COV_FORMS}")
        self.p = _check_probs(p, d)
        if standardize_features:
            X = standardize(X)
        self.n, self.d, self.form = n, d, form
        self.M = maps[0].M
        self.features = apply_maps(maps, X).reshape(n, d * self.M)
        self.mask = _pair_mask(self.p, self.M)

    def value(self, w):
        return self.value_and_grad(w, need_grad=False)[0]

    def value_and_grad(self, w, need_grad=True):
        return self._value_and_grad(_check_weights(w, self.n), need_grad)

    def _value_and_grad(self, w, need_grad=True):
        n, F = self.n, self.features
        if self.form == "scaled":
            G = w[:, None] * F
            D = G - G.sum(axis=0) / n
            C = D.T @ D / (n - 1)
        else:
            mu = (w @ F) / n
            D = F - mu
            C = (w[:, None] * D).T @ D / (n - 1)
        S = self.mask * C
        value = 0.5 * float(np.sum(S * C))
        if not need_grad:
            return value, None
        if self.form == "scaled":
            # column sums of D are zero, so centring adds no term
            grad = (2.0 / (n - 1)) * np.sum((D @ S) * F, axis=1)
        else:
            # d mu / d w_k = F_k / n; the sum_l w_l D_l factor is (n - sum w) mu
            grad = (np.sum((D @ S) * D, axis=1)
                    - (2.0 / n) * (n - w.sum()) * (F @ (S @ mu))) / (n - 1)
        return value, grad

    def grad(self, w):
        return self.value_and_grad(w)[1]


def decorrelation_objective(batch, w, maps, p, standardize_features=True, form="moments"):
    return ReweightingObjective(batch, maps, p, standardize_features, form).value(w)


def objective_grad_w(batch, w, maps, p, standardize_features=True, form="moments"):
    return ReweightingObjective(batch, maps, p, standardize_features, form).grad(w)


def project_weights(w_raw, nonnegative=True):
    """Map raw weights onto ``{w >= 0, sum(w) = n}``.

    Negatives are clamped to zero and the rest rescaled to sum to ``n``;
    if nothing positive survives the weights reset to all ones.
    """
    w = np.asarray(w_raw, dtype=float).copy()
    n = w.size
    if n < 1:
        raise InvalidArgument("need at least one weight")
    if nonnegative:
        np.maximum(w, 0.0, out=w)
        total = w.sum()
        if total <= 0.0:
            return np.ones(n)
        return w * (n / total)
    # signed variant: shift onto the hyperplane
    return w + (n - w.sum()) / n


@dataclass
class WeightResult:
    weights: np.ndarray
    objective_initial: float
    objective_final: float
    trace: list = field(default_factory=list)


def _step_multiplier(scale, n):
    return {"none": 1.0, "n": float(n), "n2": float(n) * n}[scale]


def optimize_weights(batch, maps, p, cfg=None, trace=False):
    """Fit sample weights by projected SGD with momentum from ``w = 1``.

    Each iteration takes ``buf <- momentum*buf + g + weight_decay*(w - 1)``,
    ``w <- project(w - lr*buf)``, where ``g`` is the objective gradient
    multiplied by ``n**2`` (``grad_scale="n2"``). A single sample's
    gradient entry is ``O(1/n)`` and the feasible set has ``O(n)`` extent,
    so without rescaling a step of size ``lr`` moves weights by
    ``O(lr/n**2)`` relative to their range.

    Raises
    ------
    DivergenceError
        If the objective or gradient becomes non-finite.
    """
    cfg = cfg or DecorrConfig()
    obj = ReweightingObjective(batch, maps, p, cfg.standardize_features, cfg.cov_form)
    n = obj.n
    mult = _step_multiplier(cfg.grad_scale, n)
    w = np.ones(n)
    buf = np.zeros(n)
    value, g = obj.value_and_grad(w)
    initial = value
    rows = []
    for it in range(cfg.inner_iters):
        if not np.isfinite(value + g.sum()):
            raise DivergenceError(f"weight objective diverged at iteration {it}")
        if trace:
            rows.append(_trace_row(it, value, w))
        buf = cfg.momentum * buf + mult * g + cfg.weight_decay * (w - 1.0)
        w = project_weights(w - cfg.lr * buf, cfg.nonnegative)
        value, g = obj._value_and_grad(w)
    if not np.isfinite(value):
        raise DivergenceError("weight objective diverged")
    if trace:
        rows.append(_trace_row(cfg.inner_iters, value, w))
    return WeightResult(w, initial, value, rows)


def _trace_row(it, value, w):
    q = w / w.sum()
    nz = q[q > 0]
    return {"iteration": it, "objective": value, "w_min": float(w.min()),
            "w_max": float(w.max()), "w_entropy": float(-np.sum(nz * np.log(nz)))}
