"""Soft actor-critic on vector states with a sample-weighted policy loss.

The policy is a tanh-squashed diagonal Gaussian whose network outputs
``[mean, log_std]``; two critics with target copies give the clipped
double-Q estimate. All gradients are computed by hand through
:class:`sgfd.nn.Mlp` backward passes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from sgfd._errors import DivergenceError, InsufficientData, InvalidArgument
from sgfd.decorrelation import FeatureBatch, ReweightingObjective, optimize_weights
from sgfd.nn import Adam, Mlp
from sgfd.saliency import classifier_update, feature_probs, saliency_map

logger = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -10.0, 2.0
HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
LOG2 = math.log(2.0)


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool
    env_label: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=float)
        self.a = np.atleast_1d(np.asarray(self.a, dtype=float))
        self.s_next = np.asarray(self.s_next, dtype=float)
        self.env_label = np.asarray(self.env_label, dtype=float)
        self.r = float(self.r)
        for name in ("s", "a", "s_next"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidArgument(f"transition field {name} is not finite")
        if not math.isfinite(self.r):
            raise InvalidArgument("transition reward is not finite")
        if self.env_label.sum() != 1 or not np.all((self.env_label == 0) | (self.env_label == 1)):
            raise InvalidArgument("env_label must be one-hot")


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    env_labels: np.ndarray

    def __len__(self):
        return self.s.shape[0]

    @property
    def features(self):
        return FeatureBatch(self.s, self.env_labels)

    def transitions(self):
        return [Transition(self.s[i], self.a[i], self.r[i], self.s_next[i],
                           bool(self.done[i]), self.env_labels[i]) for i in range(len(self))]


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform sampling."""

    def __init__(self, capacity, d, action_dim, K, seed=None):
        if capacity < 1:
            raise InvalidArgument("capacity must be >= 1")
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, d))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, d))
        self.done = np.zeros(capacity)
        self.env = np.zeros((capacity, K))
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self._next = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t):
        if not isinstance(t, Transition):
            t = Transition(*t)
        i = self._next
        self.s[i], self.a[i], self.r[i] = t.s, t.a, t.r
        self.s_next[i], self.done[i], self.env[i] = t.s_next, float(t.done), t.env_label
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return self

    def _ordered_index(self):
        start = self._next if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def contents(self):
        """Stored transitions, oldest first."""
        return self._gather(self._ordered_index())

    def _gather(self, idx):
        return Batch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx],
                     self.done[idx], self.env[idx])

    def sample(self, n, rng=None):
        """Uniform sample with replacement."""
        if self.size < n or n < 1:
            raise InsufficientData(f"buffer holds {self.size} transitions, need {n}")
        rng = rng or self.rng
        return self._gather(rng.integers(0, self.size, size=n))


@dataclass
class AgentConfig:
    hidden: int = 64
    hidden_layers: int = 1
    learning_rate: float = 1e-3
    alpha: float = 0.1
    gamma: float = 0.99
    tau: float = 0.01
    actor_update_frequency: int = 2
    batch_size: int = 128
    weighted_critic: bool = False

    def __post_init__(self):
        if self.hidden < 1 or self.hidden_layers < 0 or self.batch_size < 1:
            raise InvalidArgument("hidden, hidden_layers and batch_size must be positive")
        if not 0 <= self.gamma < 1:
            raise InvalidArgument("gamma must lie in [0, 1)")
        if not 0 <= self.tau <= 1:
            raise InvalidArgument("tau must lie in [0, 1]")
        if self.alpha < 0 or self.actor_update_frequency < 1 or self.learning_rate <= 0:
            raise InvalidArgument("invalid alpha / actor_update_frequency / learning_rate")


@dataclass
class PolicySample:
    a: np.ndarray
    logp: np.ndarray
    u: np.ndarray
    std: np.ndarray
    eps: np.ndarray
    log_std_mask: np.ndarray
    cache: tuple


class SacAgent:
    def __init__(self, d, action_dim, cfg=None, seed=None, noise_seed=None):
        self.cfg = cfg or AgentConfig()
        self.d, self.action_dim = d, action_dim
        init = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        hid = [self.cfg.hidden] * self.cfg.hidden_layers
        self.policy = Mlp([d, *hid, 2 * action_dim], "relu", "identity", seed=init)
        self.q1 = Mlp([d + action_dim, *hid, 1], "relu", "identity", seed=init)
        self.q2 = Mlp([d + action_dim, *hid, 1], "relu", "identity", seed=init)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        lr = self.cfg.learning_rate
        self.policy_opt, self.q1_opt, self.q2_opt = Adam(lr=lr), Adam(lr=lr), Adam(lr=lr)
        self.noise_rng = (noise_seed if isinstance(noise_seed, np.random.Generator)
                          else np.random.default_rng(noise_seed))

    # --- policy ----------------------------------------------------------

    def sample_noise(self, n):
        return self.noise_rng.standard_normal((n, self.action_dim))

    def policy_sample(self, S, eps):
        """Reparameterised ``a = tanh(mean + std * eps)`` and ``log pi(a|s)``."""
        out, cache = self.policy.forward_cache(S)
        A = self.action_dim
        mean, raw_log_std = out[:, :A], out[:, A:]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        std = np.exp(log_std)
        u = mean + std * eps
        a = np.tanh(u)
        # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
        log_jac = 2.0 * (LOG2 - u - np.logaddexp(0.0, -2.0 * u))
        logp = np.sum(-0.5 * eps * eps - log_std - HALF_LOG_2PI - log_jac, axis=1)
        mask = (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
        return PolicySample(a, logp, u, std, eps, mask, cache)

    def act(self, s, deterministic=False):
        s = np.asarray(s, dtype=float)
        out = self.policy.forward(s)
        mean = out[..., :self.action_dim]
        if deterministic:
            return np.tanh(mean)
        log_std = np.clip(out[..., self.action_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return np.tanh(mean + np.exp(log_std) * self.noise_rng.standard_normal(mean.shape))

    def deterministic_policy(self, s):
        return self.act(s, deterministic=True)

    # --- critics ---------------------------------------------------------

    def q_values(self, S, A, target=False):
        X = np.concatenate([S, A], axis=1)
        n1, n2 = (self.q1_target, self.q2_target) if target else (self.q1, self.q2)
        return n1.forward(X)[:, 0], n2.forward(X)[:, 0]

    def q_target(self, batch, noise=None):
        """Gradient-stopped soft Bellman target."""
        r, done = batch.r, batch.done
        if np.all(done):
            return r.astype(float).copy()
        eps = self.sample_noise(len(batch)) if noise is None else noise
        ps = self.policy_sample(batch.s_next, eps)
        t1, t2 = self.q_values(batch.s_next, ps.a, target=True)
        v_next = np.minimum(t1, t2) - self.cfg.alpha * ps.logp
        return r + self.cfg.gamma * (1.0 - done) * v_next

    @property
    def networks(self):
        return {"policy": self.policy, "q1": self.q1, "q2": self.q2,
                "q1_target": self.q1_target, "q2_target": self.q2_target}


@dataclass
class QLossResult:
    loss1: float
    loss2: float
    target: np.ndarray
    grads1: list
    grads2: list

    @property
    def loss(self):
        return self.loss1 + self.loss2


def q_loss(agent, batch, noise=None, w=None):
    """Mean ``0.5 (Q_i(s, a) - y)^2`` for both critics with a frozen target ``y``.

    ``w`` optionally weights the per-sample terms (weighted-critic ablation).
    """
    n = len(batch)
    if n == 0:
        raise InvalidArgument("empty batch")
    y = agent.q_target(batch, noise)
    X = np.concatenate([batch.s, batch.a], axis=1)
    weights = np.ones(n) if w is None else np.asarray(w, dtype=float)
    losses, grads = [], []
    for net in (agent.q1, agent.q2):
        q, cache = net.forward_cache(X)
        diff = q[:, 0] - y
        losses.append(float(np.sum(weights * 0.5 * diff * diff) / n))
        g, _ = net.backward_cache(cache, (weights * diff / n)[:, None])
        grads.append(g)
    if not all(math.isfinite(v) for v in losses):
        raise DivergenceError("critic loss is not finite")
    return QLossResult(losses[0], losses[1], y, grads[0], grads[1])


@dataclass
class PolicyLossResult:
    loss: float
    grads: list
    per_sample: np.ndarray


def policy_loss(agent, batch, noise=None):
    """Unweighted SAC policy objective ``mean(alpha log pi(a|s) - min(Q1, Q2)(s, a))``."""
    S = batch.s if hasattr(batch, "s") else np.asarray(batch, dtype=float)
    eps = agent.sample_noise(S.shape[0]) if noise is None else noise
    ps = agent.policy_sample(S, eps)
    q1, q2 = agent.q_values(S, ps.a)
    return float(np.mean(agent.cfg.alpha * ps.logp - np.minimum(q1, q2)))


def policy_loss_weighted(agent, batch, w=None, noise=None):
    """``(1/n) sum_k w_k (alpha log pi(a_k|s_k) - min(Q1, Q2)(s_k, a_k))``.

    ``a_k`` is reparameterised from ``noise`` (drawn from the agent's noise
    stream if omitted); ``w=None`` means uniform weights.
    """
    S = batch.s if hasattr(batch, "s") else np.asarray(batch, dtype=float)
    n = S.shape[0]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise InvalidArgument(f"weights length {w.shape} does not match batch size {n}")
    eps = agent.sample_noise(n) if noise is None else noise
    alpha, A = agent.cfg.alpha, agent.action_dim
    ps = agent.policy_sample(S, eps)
    X = np.concatenate([S, ps.a], axis=1)
    q1, c1 = agent.q1.forward_cache(X)
    q2, c2 = agent.q2.forward_cache(X)
    use1 = q1[:, 0] <= q2[:, 0]
    q_min = np.where(use1, q1[:, 0], q2[:, 0])
    per_sample = alpha * ps.logp - q_min
    loss = float(np.sum(w * per_sample) / n)

    c = w / n
    _, gx1 = agent.q1.backward_cache(c1, (use1 * c)[:, None])
    _, gx2 = agent.q2.backward_cache(c2, (~use1 * c)[:, None])
    dq_da = (gx1 + gx2)[:, -A:]
    # d loss / d u through log pi (2 tanh u per dim) and through Q(s, tanh u)
    g_u = (alpha * c)[:, None] * 2.0 * ps.a - dq_da * (1.0 - ps.a * ps.a)
    g_mean = g_u
    g_log_std = (g_u * ps.std * ps.eps - (alpha * c)[:, None]) * ps.log_std_mask
    grads, _ = agent.policy.backward_cache(ps.cache, np.concatenate([g_mean, g_log_std], axis=1))
    if not math.isfinite(loss):
        raise DivergenceError("policy loss is not finite")
    return PolicyLossResult(loss, grads, per_sample)


def soft_update(agent, tau=None):
    """``target <- tau * main + (1 - tau) * target`` for both critics."""
    tau = agent.cfg.tau if tau is None else tau
    for main, target in ((agent.q1, agent.q1_target), (agent.q2, agent.q2_target)):
        for p_main, p_target in zip(main.params, target.params):
            p_target *= 1.0 - tau
            p_target += tau * p_main
    return agent


def act(agent, s, mode="stochastic"):
    if mode not in ("stochastic", "deterministic"):
        raise InvalidArgument(f"unknown mode {mode!r}")
    return agent.act(s, deterministic=mode == "deterministic")


METHODS = ("sgfd", "uniform_decorr", "no_decorr")


@dataclass
class StepReport:
    step: int
    q_loss: float
    policy_loss: float | None
    objective_initial: float
    objective_final: float
    accuracy: float
    classifier_updated: bool
    p: np.ndarray
    weights: np.ndarray = field(repr=False)
    weight_fallback: bool = False


def train_step(agent, buffer, classifier, gate, decorr_cfg, global_step, maps,
               method="sgfd", signed_saliency=False):
    """One outer iteration of saliency-guided decorrelated SAC.

    Samples a batch, runs the gated classifier update, turns saliency
    into feature probabilities (uniform until the classifier has first
    passed its accuracy gate, and always for ``uniform_decorr``), fits
    sample weights, updates the critics on the unweighted soft Bellman
    residual, updates the policy on the weighted loss every
    ``actor_update_frequency`` steps, and soft-updates the targets.
    """
    if method not in METHODS:
        raise InvalidArgument(f"method must be one of {METHODS}")
    cfg = agent.cfg
    batch = buffer.sample(cfg.batch_size)
    features = batch.features
    d = features.d

    accuracy, updated = float("nan"), False
    if method == "sgfd" and classifier is not None:
        gate_report = classifier_update(
            classifier, lambda: buffer.sample(cfg.batch_size).features, gate, global_step)
        accuracy, updated = gate_report.accuracy, gate_report.did_update
    if method == "sgfd" and classifier is not None and classifier.ever_passed:
        p = feature_probs(saliency_map(classifier, features, signed=signed_saliency))
    else:
        p = np.full(d, 1.0 / d)

    fallback = False
    if method == "no_decorr":
        weights = np.ones(len(batch))
        obj0 = ReweightingObjective(features, maps, p, decorr_cfg.standardize_features,
                                    decorr_cfg.cov_form).value(weights)
        obj1 = obj0
    else:
        try:
            res = optimize_weights(features, maps, p, decorr_cfg)
            weights, obj0, obj1 = res.weights, res.objective_initial, res.objective_final
        except DivergenceError as exc:
            logger.warning("weight optimisation diverged at step %d (%s); using uniform weights",
                           global_step, exc)
            weights, obj0, obj1, fallback = np.ones(len(batch)), float("nan"), float("nan"), True

    ql = q_loss(agent, batch, w=weights if cfg.weighted_critic else None)
    agent.q1_opt.step(agent.q1.params, ql.grads1)
    agent.q2_opt.step(agent.q2.params, ql.grads2)

    pl = None
    if global_step % cfg.actor_update_frequency == 0:
        res_pi = policy_loss_weighted(agent, batch, weights)
        agent.policy_opt.step(agent.policy.params, res_pi.grads)
        pl = res_pi.loss

    soft_update(agent)
    return StepReport(global_step, ql.loss, pl, obj0, obj1, accuracy, updated, p, weights, fallback)
