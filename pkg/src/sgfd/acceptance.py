"""Named acceptance suites.

Each suite returns a list of :class:`Check` records, one per criterion,
with the measured value that decided it. ``run_suite("all")`` runs them
in order; the CLI ``accept`` subcommand prints them and exits nonzero on
any failure.

==============  ==========================================================
suite           criterion
==============  ==========================================================
identities      uniform-weight identities (covariance, policy loss, Pearson)
gradients       analytic vs central finite-difference gradients
estimator       RFF dependence score vs a permutation null
saliency        changed-feature identification by the env classifier
decorrelation   weighted-Pearson reduction, saliency vs uniform guidance
endtoend        extrapolation return, three arms over 10 seeds
gating          classifier untouched during warmup and above threshold
determinism     two ``train`` executions give the same manifest hash
==============  ==========================================================
"""

from __future__ import annotations

import json
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sgfd.agent import AgentConfig, Batch, SacAgent, policy_loss, policy_loss_weighted, q_loss
from sgfd.config import RunConfig
from sgfd.decorrelation import (FeatureBatch, ReweightingObjective, cross_cov,
                                permutation_null, weighted_cross_cov, weighted_moment_cross_cov)
from sgfd.envs import make_spurious_bandit, rollout_dataset, shifted_feature_dataset
from sgfd.estimators import SaliencyGuidedReweighter
from sgfd.metrics import correlation_matrix, pearson, weighted_pearson
from sgfd.rff import rff_sample, sample_maps
from sgfd.runner import run_experiment
from sgfd.saliency import (ClassifierGate, EnvClassifier, classifier_accuracy, classifier_update,
                           feature_probs, saliency_map)


@dataclass
class Check:
    criterion: int
    name: str
    passed: bool
    measured: str
    need: str = ""
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        need = f" [need {self.need}]" if self.need else ""
        return (f"[{status}] criterion {self.criterion} {self.name}: {self.measured}{need} "
                f"({self.seconds:.1f}s)")


def _timed(fn):
    def wrapper(**kwargs):
        t0 = time.perf_counter()
        check = fn(**kwargs)
        check.seconds = time.perf_counter() - t0
        return check
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _rel_err(analytic, numeric):
    a = np.concatenate([np.ravel(x) for x in analytic])
    b = np.concatenate([np.ravel(x) for x in numeric])
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def _fd(f, arrays, h):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arrays`` (in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def _safe_step(net, X, h=1e-5):
    """FD step small enough that no hidden ReLU pre-activation changes sign.

    Moving one first-layer parameter by ``h`` shifts a pre-activation by at
    most ``h * max(1, |x|)``; keeping that under a tenth of the smallest
    margin keeps central differences off the kinks.
    """
    W, b = net.weights[0], net.biases[0]
    margin = np.min(np.abs(np.atleast_2d(X) @ W.T + b))
    return min(h, 0.1 * margin / max(1.0, float(np.max(np.abs(X)))))


def _random_batch(rng, n, d, A, K, all_done=False):
    done = np.ones(n) if all_done else (rng.random(n) < 0.3).astype(float)
    return Batch(rng.normal(size=(n, d)), rng.uniform(-0.9, 0.9, (n, A)), rng.normal(size=n),
                 rng.normal(size=(n, d)), done, np.eye(K)[rng.integers(0, K, n)])


# --- 1 ------------------------------------------------------------------

@_timed
def identities(cases=20):
    """Uniform weights reproduce the unweighted computations."""
    worst_pearson = 0.0
    ok = True
    for seed in range(cases):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 300))
        u, v = rng.normal(size=(n, 5)), rng.normal(size=(n, 5))
        ones = np.ones(n)
        ok &= np.array_equal(weighted_cross_cov(u, v, ones), cross_cov(u, v))
        ok &= np.array_equal(weighted_moment_cross_cov(u, v, ones), cross_cov(u, v))

        agent = SacAgent(4, 2, AgentConfig(hidden=16), seed=seed, noise_seed=seed)
        batch = _random_batch(rng, 32, 4, 2, 3)
        eps = rng.normal(size=(32, 2))
        ok &= policy_loss_weighted(agent, batch, np.ones(32), eps).loss == policy_loss(agent, batch, eps)

        x, y = rng.normal(size=n), rng.normal(size=n)
        worst_pearson = max(worst_pearson, abs(weighted_pearson(x, y, ones) - pearson(x, y)))
    ok &= worst_pearson <= 1e-12
    return Check(1, "identities", bool(ok),
                 f"{cases} cases bit-exact={bool(ok)}, max |pearson_w - pearson| = {worst_pearson:.1e}",
                 "bit-exact covariances and losses, pearson within 1e-12")


# --- 2 ------------------------------------------------------------------

def _grad_case(seed):
    rng = np.random.default_rng(seed)
    errs = {}
    d, K, A, n = 4, 3, 2, 8

    clf = EnvClassifier(d, K, hidden=16, seed=seed)
    X, Y = rng.normal(size=(n, d)), np.eye(K)[rng.integers(0, K, n)]
    _, g = clf.loss_and_grads(X, Y)
    errs["classifier"] = _rel_err(g, _fd(lambda: clf.loss_and_grads(X, Y)[0], clf.net.params,
                                         _safe_step(clf.net, X)))

    agent = SacAgent(d, A, AgentConfig(hidden=16, alpha=0.2), seed=seed, noise_seed=seed)
    batch = _random_batch(rng, n, d, A, K)
    eps = rng.normal(size=(n, A))
    w = rng.uniform(0.2, 2.0, n)
    res = policy_loss_weighted(agent, batch, w, eps)
    errs["policy"] = _rel_err(res.grads, _fd(
        lambda: policy_loss_weighted(agent, batch, w, eps).loss, agent.policy.params, 1e-6))

    ql = q_loss(agent, batch, noise=eps)
    SA = np.concatenate([batch.s, batch.a], axis=1)
    errs["critic"] = max(
        _rel_err(ql.grads1, _fd(lambda: q_loss(agent, batch, noise=eps).loss1, agent.q1.params,
                                _safe_step(agent.q1, SA))),
        _rel_err(ql.grads2, _fd(lambda: q_loss(agent, batch, noise=eps).loss2, agent.q2.params,
                                _safe_step(agent.q2, SA))))

    fb = FeatureBatch(rng.normal(size=(24, d)), np.eye(K)[rng.integers(0, K, 24)])
    obj = ReweightingObjective(fb, sample_maps(d, 5, seed), feature_probs(rng.normal(size=d)))
    wv = rng.uniform(0.5, 1.5, 24)
    _, gw = obj.value_and_grad(wv)
    errs["objective"] = _rel_err([gw], _fd(lambda: obj.value(wv), [wv], 1e-6))
    return errs


@_timed
def gradients(cases=100):
    """Finite-difference agreement for every hand-written gradient."""
    worst = {"classifier": 0.0, "policy": 0.0, "critic": 0.0, "objective": 0.0}
    for seed in range(cases):
        for k, v in _grad_case(seed).items():
            worst[k] = max(worst[k], v)
    ok = worst["policy"] < 1e-3 and all(worst[k] < 1e-4 for k in ("classifier", "critic", "objective"))
    measured = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return Check(2, "gradients", ok, f"max rel err over {cases} cases: {measured}",
                 "policy < 1e-3, others < 1e-4")


# --- 3 ------------------------------------------------------------------

@_timed
def estimator(seeds=50, n=512, M=5, n_perm=1000):
    """RFF score vs permutation null for independent and dependent pairs."""
    indep_ok = dep_ok = 0
    for seed in range(seeds):
        rng = np.random.default_rng(10_000 + seed)
        mx, my = rff_sample(M, rng), rff_sample(M, rng)
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        obs, null = permutation_null(x, y, mx, my, n_perm, rng)
        indep_ok += obs < np.quantile(null, 0.95)
        y = np.sin(3 * x) + 0.1 * rng.standard_normal(n)
        obs, null = permutation_null(x, y, mx, my, n_perm, rng)
        dep_ok += obs > np.quantile(null, 0.99)
    ok = indep_ok >= 0.9 * seeds and dep_ok >= 0.95 * seeds
    return Check(3, "estimator", ok, f"independent below q95 {indep_ok}/{seeds}, "
                                     f"sin(3x) above q99 {dep_ok}/{seeds}",
                 f"independent >= {0.9 * seeds:g}, dependent >= {0.95 * seeds:g}")


# --- 4 ------------------------------------------------------------------

@_timed
def saliency(seeds=20, K=4, d=5, shift=4.0, max_updates=200, batch_size=128):
    """Classifier accuracy gate and argmax saliency on a single shifted feature."""
    reached, hits, worst_updates = 0, 0, 0
    for seed in range(seeds):
        shifted = seed % d
        X, Y = shifted_feature_dataset(K, d, shifted, shift, 2000, seed)
        X_test, Y_test = shifted_feature_dataset(K, d, shifted, shift, 500, seed + 1000)
        test = FeatureBatch(X_test, Y_test)
        rng = np.random.default_rng(seed)
        clf = EnvClassifier(d, K, seed=seed)
        updates = None
        for u in range(1, max_updates + 1):
            idx = rng.integers(0, X.shape[0], batch_size)
            clf.fit_batch(X[idx], Y[idx])
            if classifier_accuracy(clf, test) >= 0.9:
                updates = u
                break
        if updates is not None:
            reached += 1
            worst_updates = max(worst_updates, updates)
        p = feature_probs(saliency_map(clf, test))
        hits += int(np.argmax(p)) == shifted
    ok = reached == seeds and hits >= 0.95 * seeds
    return Check(4, "saliency", ok, f"accuracy >= 0.9 within {max_updates} updates in "
                                    f"{reached}/{seeds} seeds (worst {worst_updates}), "
                                    f"argmax p = shifted feature {hits}/{seeds}; shift {shift} sd",
                 f"all seeds reach 0.9, argmax hits >= {0.95 * seeds:g}")


# --- 5 ------------------------------------------------------------------

@_timed
def decorrelation(seeds=20, n=512):
    """Weighted |Pearson| of the changed feature: saliency vs uniform guidance."""
    suite = make_spurious_bandit(4)
    idx = suite.train[0].changed_feature_index
    ratios_s, ratios_u = [], []
    for seed in range(seeds):
        data = rollout_dataset(suite, n // suite.K, seed)
        X, y = data["states"], data["env"]
        batch = FeatureBatch(X, data["env_onehot"])
        base = correlation_matrix(batch, changed_feature_index=idx).summary
        for guidance, out in (("saliency", ratios_s), ("uniform", ratios_u)):
            w = SaliencyGuidedReweighter(guidance=guidance, random_state=seed).fit(X, y).sample_weight_
            out.append(correlation_matrix(batch, w, changed_feature_index=idx).summary / base)
    ratios_s, ratios_u = np.array(ratios_s), np.array(ratios_u)
    frac = float(np.mean(ratios_s <= 0.5))
    ok = frac >= 0.8 and ratios_u.mean() > ratios_s.mean()
    return Check(5, "decorrelation", ok,
                 f"sgfd ratio <= 0.5 in {frac:.0%} of {seeds} seeds; mean ratio sgfd "
                 f"{ratios_s.mean():.3f} vs uniform {ratios_u.mean():.3f}",
                 "ratio <= 0.5 in >= 80% of seeds, sgfd mean below uniform")


# --- 6 ------------------------------------------------------------------

def endtoend_returns(seeds=10, steps=20000, out_dir=None, episodes=500):
    """Final extrapolation return per (method, seed)."""
    out_dir = Path(out_dir or tempfile.mkdtemp(prefix="sgfd-e2e-"))
    results = {}
    for method in ("sgfd", "uniform_decorr", "no_decorr"):
        results[method] = []
        for seed in range(seeds):
            cfg = RunConfig().replace("run", seed=seed, method=method, total_steps=steps,
                                      eval_every=steps, checkpoint_every=steps,
                                      eval_episodes=episodes,
                                      output_dir=str(out_dir / f"{method}-{seed}"))
            manifest = run_experiment(cfg)
            results[method].append(manifest["final_returns"]["extrapolation"])
    return {k: np.array(v) for k, v in results.items()}


@_timed
def endtoend(seeds=10, steps=20000, out_dir=None):
    """SGFD vs no_decorr (paired wins) and vs uniform_decorr (means), extrapolation."""
    r = endtoend_returns(seeds, steps, out_dir)
    wins = int(np.sum(r["sgfd"] > r["no_decorr"]))
    means = {k: float(v.mean()) for k, v in r.items()}
    ok = (means["sgfd"] > means["no_decorr"] and wins >= 0.8 * seeds
          and means["sgfd"] > means["uniform_decorr"])
    return Check(6, "endtoend", ok,
                 f"mean extrapolation return sgfd {means['sgfd']:.5f}, uniform_decorr "
                 f"{means['uniform_decorr']:.5f}, no_decorr {means['no_decorr']:.5f}; "
                 f"paired wins vs no_decorr {wins}/{seeds}; {steps} steps per arm",
                 f"sgfd mean above both baselines, wins >= {0.8 * seeds:g}")


# --- 7 ------------------------------------------------------------------

@_timed
def gating(steps=60, warmup=20, seed=0):
    """Classifier parameters never move before warmup or after a passing check."""
    d, K = 5, 4
    X, Y = shifted_feature_dataset(K, d, 1, 4.0, 500, seed)
    rng = np.random.default_rng(seed)
    clf = EnvClassifier(d, K, seed=seed)
    gate = ClassifierGate(warmup_steps=warmup)
    violations, frozen_iters, updates = 0, 0, 0
    for step in range(steps):
        log = []

        def sampler():
            idx = rng.integers(0, X.shape[0], 128)
            batch = FeatureBatch(X[idx], Y[idx])
            log.append((classifier_accuracy(clf, batch), [p.copy() for p in clf.net.params]))
            return batch

        before = [p.copy() for p in clf.net.params]
        report = classifier_update(clf, sampler, gate, step)
        after = clf.net.params
        unchanged = all(np.array_equal(a, b) for a, b in zip(before, after))
        if step < warmup:
            violations += not unchanged or bool(log)
            frozen_iters += 1
            continue
        # the iteration that measured > threshold is the last one; nothing may change after it
        snapshots = [params for _, params in log] + [[p.copy() for p in after]]
        for i, (acc, _) in enumerate(log):
            if acc > gate.accuracy_threshold:
                frozen_iters += 1
                violations += not all(np.array_equal(a, b)
                                      for a, b in zip(snapshots[i], snapshots[i + 1]))
        updates += report.iterations
    ok = violations == 0 and updates > 0 and frozen_iters > warmup
    return Check(7, "gating", ok, f"{violations} violations over {frozen_iters} gated iterations "
                                  f"({updates} updates taken)", "0 violations")


# --- 8 ------------------------------------------------------------------

@_timed
def determinism(steps=2000, seed=3, out_dir=None):
    """Two separate ``train`` processes with the same config and seed."""
    out_dir = Path(out_dir or tempfile.mkdtemp(prefix="sgfd-det-"))
    env = {**os.environ, "SGFD_RUN_EVAL_EVERY": str(steps // 2), "SGFD_RUN_EVAL_EPISODES": "100"}
    hashes = []
    for tag in ("a", "b"):
        subprocess.run([sys.executable, "-m", "sgfd.cli", "train", "--seed", str(seed),
                        "--steps", str(steps), "--out", str(out_dir / tag)],
                       check=True, env=env, capture_output=True)
        manifest = json.loads((out_dir / tag / "manifest.json").read_text())
        hashes.append(manifest["hash"])
    ok = hashes[0] == hashes[1]
    return Check(8, "determinism", ok, f"hashes {hashes[0][:16]} / {hashes[1][:16]}", "identical hashes")


SUITES = {
    "identities": identities,
    "gradients": gradients,
    "estimator": estimator,
    "saliency": saliency,
    "decorrelation": decorrelation,
    "endtoend": endtoend,
    "gating": gating,
    "determinism": determinism,
}


def run_suite(name, **kwargs):
    """Run one named suite (or ``"all"``) and return its checks."""
    if name == "all":
        return [fn() for fn in SUITES.values()]
    if name not in SUITES:
        raise KeyError(name)
    return [SUITES[name](**kwargs)]
