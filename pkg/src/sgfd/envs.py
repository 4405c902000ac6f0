"""Synthetic multi-environment tasks with a controlled changed feature.

Each generator returns ``K`` training environments that differ in one
variation parameter (exposed as the *changed* state feature) plus an
:class:`EvalSuite` of held-out parameter values. Nuisance features are
spuriously correlated with the changed feature during training only.

State layout of the spurious bandit::

    [z_rel, z_changed, z_nui, noise_1, ..., noise_{d-3}]

State layout of the point-mass::

    [x, v, goal, mass, z_nui, noise_1, ...]
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from sgfd._errors import InvalidArgument

logger = logging.getLogger(__name__)


@dataclass
class EvalSuite:
    mode: str
    train_range: tuple
    test_values: list

    def __post_init__(self):
        lo, hi = self.train_range
        vals = np.asarray(self.test_values, dtype=float)
        if self.mode == "interpolation":
            ok = np.all((vals > lo) & (vals < hi))
        elif self.mode == "extrapolation":
            ok = np.all((vals < lo) | (vals > hi))
        else:
            raise InvalidArgument(f"unknown eval mode {self.mode!r}")
        if not ok:
            raise InvalidArgument(f"{self.mode} test values {self.test_values} violate range {self.train_range}")


def make_eval_suites(train_values, n_test=2, positive=False):
    """Interpolation midpoints and extrapolation points a quarter-span beyond.

    With ``positive=True`` (e.g. a mass) the lower extrapolation point is
    ``lo / 2`` whenever a quarter-span below would not be positive.
    """
    vals = np.sort(np.asarray(train_values, dtype=float))
    lo, hi = float(vals[0]), float(vals[-1])
    mids = (vals[:-1] + vals[1:]) / 2
    pick = np.linspace(0, len(mids) - 1, min(n_test, len(mids))).round().astype(int)
    span = hi - lo
    interp = EvalSuite("interpolation", (lo, hi), [float(m) for m in mids[np.unique(pick)]])
    below = lo - 0.25 * span
    if positive and below <= 0:
        below = lo / 2
    extrap = EvalSuite("extrapolation", (lo, hi), [below, hi + 0.25 * span])
    return {"interpolation": interp, "extrapolation": extrap}


@dataclass
class BanditConfig:
    """Spurious contextual bandit settings.

    ``rho`` is the Pearson correlation between the changed and nuisance
    features in pooled training data. ``changed_noise`` is the within-
    environment std of the changed feature around the environment's
    variation value.
    """

    d: int = 5
    train_range: tuple = (1.0, 5.0)
    changed_noise: float = 0.3
    rho: float = 0.8
    noise_std: float = 0.0
    noise_shift: float = 0.0
    slope: float = 0.5
    horizon: int = 1

    def __post_init__(self):
        if self.d < 3:
            raise InvalidArgument("bandit needs d >= 3")
        if not -1 < self.rho < 1:
            raise InvalidArgument("correlation target must satisfy |rho| < 1")
        if self.changed_noise <= 0 or self.noise_std < 0 or self.horizon < 1:
            raise InvalidArgument("invalid bandit noise/horizon settings")


class SpuriousBandit:
    """One environment of the spurious bandit.

    The optimal action is ``g = 0.5 tanh(z_rel) + 0.4 tanh(slope * (z_changed - centre))``
    and the reward is ``-(a - g)**2`` plus optional Gaussian noise.
    ``correlated=False`` draws the nuisance feature independently
    (test environments).
    """

    kind = "spurious_bandit"
    changed_feature_index = 1
    nuisance_index = 2
    action_dim = 1

    def __init__(self, value, cfg, pool_values, correlated=True, env_id=0):
        self.value = float(value)
        self.cfg = cfg
        self.correlated = correlated
        self.env_id = env_id
        pool = np.asarray(pool_values, dtype=float)
        # moments of the pooled training mixture of the changed feature
        self._mu = float(pool.mean())
        self._sd = float(np.sqrt(pool.var() + cfg.changed_noise ** 2))
        self._centre = float(np.mean(cfg.train_range))
        self.rng = np.random.default_rng(0)
        self.t = 0
        self.state = None

    @property
    def d(self):
        return self.cfg.d

    def optimal_action(self, state):
        return np.array([self._target(state)])

    def _target(self, state):
        return 0.5 * np.tanh(state[0]) + 0.4 * np.tanh(self.cfg.slope * (state[1] - self._centre))

    def sample_states(self, n, rng):
        cfg = self.cfg
        z_rel = rng.standard_normal(n)
        z_c = self.value + cfg.changed_noise * rng.standard_normal(n)
        eps = rng.standard_normal(n)
        if self.correlated:
            s = (z_c - self._mu) / self._sd
            z_nui = cfg.rho * s + np.sqrt(1 - cfg.rho ** 2) * eps
        else:
            z_nui = eps
        noise = rng.standard_normal((n, cfg.d - 3))
        if self.correlated and cfg.noise_shift:
            noise += cfg.noise_shift * self.env_id
        return np.column_stack([z_rel, z_c, z_nui, noise])

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.state = self.sample_states(1, self.rng)[0]
        return self.state.copy()

    def step(self, action):
        a = _clip_action(action, self.action_dim)
        r = -float((a[0] - self._target(self.state)) ** 2)
        if self.cfg.noise_std:
            r += self.cfg.noise_std * float(self.rng.standard_normal())
        self.t += 1
        done = self.t >= self.cfg.horizon
        self.state = self.sample_states(1, self.rng)[0]
        return self.state.copy(), r, done


def _clip_action(action, dim):
    a = np.asarray(action, dtype=float).reshape(dim)
    if np.any(np.abs(a) > 1):
        logger.warning("action %s outside [-1, 1]; clipping", a)
        a = np.clip(a, -1.0, 1.0)
    return a


@dataclass
class EnvSuite:
    """Training environments plus evaluation environments per split."""

    train: list
    eval_suites: dict
    eval_envs: dict
    spec: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.train)


def _train_values(K, train_range):
    return np.linspace(train_range[0], train_range[1], K)


def make_spurious_bandit(K, cfg=None, d=None):
    """``K`` training bandits with values evenly spread over ``cfg.train_range``."""
    cfg = cfg or BanditConfig(**({} if d is None else {"d": d}))
    if K < 2:
        raise InvalidArgument("need K >= 2 training environments")
    values = _train_values(K, cfg.train_range)
    train = [SpuriousBandit(v, cfg, values, True, k) for k, v in enumerate(values)]
    suites = make_eval_suites(values)
    eval_envs = {mode: [SpuriousBandit(v, cfg, values, False) for v in suite.test_values]
                 for mode, suite in suites.items()}
    spec = {"kind": "spurious_bandit", "K": K, "variation_values": values.tolist(),
            "changed_feature_index": SpuriousBandit.changed_feature_index, **asdict(cfg)}
    return EnvSuite(train, suites, eval_envs, spec)


@dataclass
class PointMassConfig:
    d: int = 6
    train_range: tuple = (1.0, 5.0)
    dt: float = 0.1
    horizon: int = 100
    rho: float = 0.8

    def __post_init__(self):
        if self.d < 5:
            raise InvalidArgument("point-mass state needs d >= 5")
        if not -1 < self.rho < 1:
            raise InvalidArgument("correlation target must satisfy |rho| < 1")


class PointMass:
    """Euler-integrated point-mass with mass ``m`` and goal-tracking reward."""

    kind = "pointmass"
    changed_feature_index = 3
    nuisance_index = 4
    action_dim = 1

    def __init__(self, mass, cfg, pool_values, correlated=True, env_id=0):
        if mass <= 0:
            raise InvalidArgument("mass must be positive")
        self.mass = float(mass)
        self.cfg = cfg
        self.correlated = correlated
        self.env_id = env_id
        pool = np.asarray(pool_values, dtype=float)
        self._mu, self._sd = float(pool.mean()), float(pool.std() or 1.0)
        self.rng = np.random.default_rng(0)
        self.x = self.v = self.goal = 0.0
        self.t = 0
        self._extra = np.zeros(cfg.d - 4)

    @property
    def d(self):
        return self.cfg.d

    def _state(self):
        return np.concatenate([[self.x, self.v, self.goal, self.mass], self._extra])

    def reset(self, seed=None):
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.t = 0
        self.x = float(self.rng.uniform(-1, 1))
        self.v = 0.0
        self.goal = float(self.rng.uniform(-1, 1))
        self._resample_extra()
        return self._state()

    def _resample_extra(self):
        eps = self.rng.standard_normal(self.cfg.d - 4)
        if self.correlated:
            s = (self.mass - self._mu) / self._sd
            eps[0] = self.cfg.rho * s + np.sqrt(1 - self.cfg.rho ** 2) * eps[0]
        self._extra = eps

    def step(self, action):
        a = _clip_action(action, self.action_dim)[0]
        dt = self.cfg.dt
        self.x = self.x + self.v * dt
        self.v = self.v + (a / self.mass) * dt
        self.t += 1
        r = -(self.x - self.goal) ** 2
        self._resample_extra()
        return self._state(), float(r), self.t >= self.cfg.horizon


def make_pointmass(K, cfg=None):
    cfg = cfg or PointMassConfig()
    if K < 2:
        raise InvalidArgument("need K >= 2 training environments")
    values = _train_values(K, cfg.train_range)
    train = [PointMass(m, cfg, values, True, k) for k, m in enumerate(values)]
    suites = make_eval_suites(values, positive=True)
    eval_envs = {mode: [PointMass(m, cfg, values, False) for m in suite.test_values]
                 for mode, suite in suites.items()}
    spec = {"kind": "pointmass", "K": K, "variation_values": values.tolist(),
            "changed_feature_index": PointMass.changed_feature_index, **asdict(cfg)}
    return EnvSuite(train, suites, eval_envs, spec)


def make_suite(kind, K, **kwargs):
    if kind == "spurious_bandit":
        return make_spurious_bandit(K, BanditConfig(**kwargs))
    if kind == "pointmass":
        return make_pointmass(K, PointMassConfig(**kwargs))
    raise InvalidArgument(f"unknown env kind {kind!r}")


def shifted_feature_dataset(K, d, shifted_index, shift, n_per_env, seed):
    """``K`` Gaussian environments differing only in the mean of one feature.

    Environment ``k`` has ``N(0, I)`` features except ``shifted_index``,
    whose mean is ``k * shift``. Returns ``(X, one_hot_labels)``.
    """
    if not 0 <= shifted_index < d:
        raise InvalidArgument("shifted_index out of range")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((K * n_per_env, d))
    labels = np.repeat(np.arange(K), n_per_env)
    X[:, shifted_index] += shift * labels
    return X, np.eye(K)[labels]


def rollout_dataset(suite, n_per_env, seed, policy=None):
    """Offline transitions from every training environment.

    Returns a dict of arrays: states, actions, rewards, env labels.
    Actions default to uniform random in ``[-1, 1]``.
    """
    rng = np.random.default_rng(seed)
    S, A, R, E = [], [], [], []
    for k, env in enumerate(suite.train):
        s = env.reset(seed=[int(seed), k])
        for _ in range(n_per_env):
            a = policy(s) if policy else rng.uniform(-1, 1, env.action_dim)
            s_next, r, done = env.step(a)
            S.append(s)
            A.append(np.atleast_1d(a))
            R.append(r)
            E.append(k)
            s = env.reset() if done else s_next
    return {"states": np.array(S), "actions": np.array(A), "rewards": np.array(R),
            "env": np.array(E), "env_onehot": np.eye(len(suite.train))[E]}
