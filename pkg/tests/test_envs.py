import logging

import numpy as np
import pytest

from sgfd._errors import InvalidArgument
from sgfd.envs import (BanditConfig, EvalSuite, PointMass, PointMassConfig, make_eval_suites,
                       make_pointmass, make_spurious_bandit, make_suite, rollout_dataset,
                       shifted_feature_dataset)
from sgfd.metrics import pearson


def pooled_states(suite, n_per_env, seed):
    rng = np.random.default_rng(seed)
    X = [env.sample_states(n_per_env, rng) for env in suite.train]
    return np.vstack(X), np.repeat(np.arange(suite.K), n_per_env)


def test_optimal_action_gives_zero_reward():
    suite = make_spurious_bandit(4)
    for env in suite.train + suite.eval_envs["extrapolation"]:
        s = env.reset(seed=1)
        _, r, done = env.step(env.optimal_action(s))
        assert r == 0.0 and done


def test_reward_is_negative_squared_error():
    env = make_spurious_bandit(3).train[0]
    s = env.reset(seed=0)
    g = env.optimal_action(s)[0]
    _, r, _ = env.step(np.array([g + 0.3]))
    assert r == pytest.approx(-0.09, abs=1e-15)


def test_training_correlation_hits_target():
    X, _ = pooled_states(make_spurious_bandit(4), 500, seed=0)
    # the construction standardises with the pooled mixture moments, so the
    # population coefficient equals rho exactly
    assert abs(pearson(X[:, 1], X[:, 2]) - 0.8) < 0.1


@pytest.mark.parametrize("rho", [0.3, -0.5, 0.95])
def test_correlation_target_configurable(rho):
    X, _ = pooled_states(make_spurious_bandit(4, BanditConfig(rho=rho)), 2000, seed=1)
    assert abs(pearson(X[:, 1], X[:, 2]) - rho) < 0.05


def test_test_envs_break_the_correlation():
    env = make_spurious_bandit(4).eval_envs["interpolation"][0]
    X = env.sample_states(5000, np.random.default_rng(2))
    assert abs(pearson(X[:, 1], X[:, 2])) < 0.05


@pytest.mark.parametrize("rho", [1.0, -1.0, 1.5])
def test_invalid_correlation_rejected(rho):
    with pytest.raises(InvalidArgument):
        BanditConfig(rho=rho)


def test_eval_splits_respect_train_range():
    suite = make_spurious_bandit(4)
    ext = suite.eval_suites["extrapolation"]
    assert ext.train_range == (1.0, 5.0)
    assert all(v < 1 or v > 5 for v in ext.test_values)
    assert all(1 < v < 5 for v in suite.eval_suites["interpolation"].test_values)
    with pytest.raises(InvalidArgument):
        EvalSuite("extrapolation", (1.0, 5.0), [3.0])
    with pytest.raises(InvalidArgument):
        EvalSuite("interpolation", (1.0, 5.0), [5.0])
    assert make_eval_suites([1, 5])["extrapolation"].test_values == [0.0, 6.0]


def test_distribution_shift_certificate():
    for kind in ("spurious_bandit",):
        suite = make_suite(kind, 4)
        X, env = pooled_states(suite, 1000, seed=3)
        c = suite.train[0].changed_feature_index
        means = np.array([X[env == k, c].mean() for k in range(4)])
        pooled_sd = np.sqrt(np.mean([X[env == k, c].var(ddof=1) for k in range(4)]))
        assert np.min(np.diff(np.sort(means))) >= 2 * pooled_sd


def test_reset_determinism_and_horizon():
    cfg = BanditConfig(horizon=3)
    env = make_spurious_bandit(2, cfg).train[1]
    a = env.reset(seed=5)
    assert np.array_equal(a, env.reset(seed=5))
    dones = [env.step(np.zeros(1))[2] for _ in range(3)]
    assert dones == [False, False, True]


def test_out_of_range_action_clipped(caplog):
    env = make_spurious_bandit(2).train[0]
    s = env.reset(seed=0)
    g = env.optimal_action(s)[0]
    with caplog.at_level(logging.WARNING, logger="sgfd.envs"):
        _, r, _ = env.step(np.array([3.0]))
    assert r == pytest.approx(-(1.0 - g) ** 2)
    assert "clipping" in caplog.text


def test_bandit_rejects_small_d_and_k():
    with pytest.raises(InvalidArgument):
        BanditConfig(d=2)
    with pytest.raises(InvalidArgument):
        make_spurious_bandit(1)


# --- point mass ----------------------------------------------------------------

def test_pointmass_free_dynamics():
    env = PointMass(2.0, PointMassConfig(), [1.0, 5.0])
    s = env.reset(seed=0)
    x0 = s[0]
    env.v = 0.4
    xs = []
    for _ in range(5):
        s, r, _ = env.step(np.zeros(1))
        xs.append(s[0])
        assert s[1] == 0.4
    assert np.allclose(np.diff([x0, *xs]), 0.4 * 0.1, atol=1e-15)


def test_pointmass_velocity_halves_with_double_mass():
    actions = np.random.default_rng(0).uniform(-1, 1, 20)
    dv = {}
    for m in (1.0, 2.0):
        env = PointMass(m, PointMassConfig(), [1.0, 2.0])
        env.reset(seed=1)
        vs = [env.v]
        for a in actions:
            vs.append(env.step(np.array([a]))[0][1])
        dv[m] = np.diff(vs)
    # Euler recursion: v' - v = (a / m) dt
    assert np.allclose(dv[1.0], actions * 0.1, atol=1e-15)
    assert np.allclose(dv[2.0], dv[1.0] / 2, atol=1e-15)


def test_pointmass_determinism_and_done():
    def roll(seed):
        env = make_pointmass(3).train[2]
        out = [env.reset(seed=seed)]
        done = False
        t = 0
        while not done:
            s, r, done = env.step(np.array([np.sin(t)]))
            out.append(s)
            assert np.isfinite(r)
            t += 1
        return np.array(out), t

    a, ta = roll(4)
    b, tb = roll(4)
    assert np.array_equal(a, b) and ta == tb == 100


def test_pointmass_rejects_nonpositive_mass():
    with pytest.raises(InvalidArgument):
        PointMass(0.0, PointMassConfig(), [1.0])


def test_pointmass_state_layout():
    suite = make_pointmass(4)
    s = suite.train[3].reset(seed=0)
    assert s.shape == (6,) and s[3] == 5.0
    # a quarter-span below 1 would be a zero mass; halve the lower end instead
    assert suite.eval_suites["extrapolation"].test_values == [0.5, 6.0]


# --- datasets ------------------------------------------------------------------

def test_shifted_feature_dataset():
    X, Y = shifted_feature_dataset(4, 5, 2, 4.0, 1000, 0)
    env = Y.argmax(1)
    means = np.array([X[env == k].mean(0) for k in range(4)])
    assert np.allclose(means[:, 2], 4.0 * np.arange(4), atol=0.2)
    assert np.allclose(np.delete(means, 2, axis=1), 0, atol=0.2)


def test_rollout_dataset_seeded():
    suite = make_spurious_bandit(3)
    a = rollout_dataset(suite, 20, seed=1)
    b = rollout_dataset(make_spurious_bandit(3), 20, seed=1)
    assert np.array_equal(a["states"], b["states"]) and np.array_equal(a["rewards"], b["rewards"])
    assert a["states"].shape == (60, 5) and np.all(a["rewards"] <= 0)
