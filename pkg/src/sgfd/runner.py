"""Seeded experiment runner: training loop, periodic evaluation, artifacts.

Output directory layout::

    manifest.json                 resolved config, build id, RNG tag, RFF maps, CSV hashes
    steps.csv                     one row per training step
    classifier_accuracy.csv       gate accuracy per step (sgfd arm only)
    returns.csv                   step, mode, mean, std
    correlation_{raw,uniform,saliency}.csv   the three weighting arms
    correlations.json             summaries of the three reports
    checkpoints/{policy,q1,q2}.txt            last good parameters

All randomness comes from named streams of the run seed (see
:mod:`sgfd.seeding`). The manifest is written first with
``status = "incomplete"`` and rewritten when the run ends.
"""

from __future__ import annotations

import hashlib
import logging
import subprocess
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path

import numpy as np

from sgfd._errors import DivergenceError
from sgfd.agent import AgentConfig, ReplayBuffer, SacAgent, Transition, train_step
from sgfd.decorrelation import DecorrConfig, FeatureBatch, optimize_weights
from sgfd.envs import BanditConfig, PointMassConfig, make_pointmass, make_spurious_bandit
from sgfd.io import sha256_file, write_csv, write_json
from sgfd.metrics import correlation_matrix, evaluate_return
from sgfd.nn import Mlp
from sgfd.rff import sample_maps
from sgfd.saliency import ClassifierGate, EnvClassifier, feature_probs, saliency_map
from sgfd.seeding import RNG_ALGORITHM, stream

logger = logging.getLogger(__name__)

CSV_FILES = ("steps.csv", "classifier_accuracy.csv", "returns.csv", "correlation_raw.csv",
             "correlation_uniform.csv", "correlation_saliency.csv")


class RunDiverged(RuntimeError):
    """Training hit a non-finite update; the last good checkpoint is kept."""

    def __init__(self, step, manifest):
        super().__init__(f"run diverged at step {step}")
        self.step = step
        self.manifest = manifest


def build_id():
    """Package version plus the git commit, when available."""
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    try:
        commit = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                                text=True, cwd=Path(__file__).parent, timeout=5).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        commit = ""
    return f"{version}+{commit}" if commit else version


def make_env_suite(cfg):
    e = cfg.env
    if e.kind == "spurious_bandit":
        return make_spurious_bandit(e.K, BanditConfig(
            d=e.d, train_range=(e.lo, e.hi), changed_noise=e.changed_noise, rho=e.rho,
            noise_std=e.noise_std, horizon=e.horizon))
    return make_pointmass(e.K, PointMassConfig(d=max(e.d, 5), train_range=(e.lo, e.hi),
                                               rho=e.rho, horizon=e.horizon))


def agent_config(cfg):
    a = cfg.agent
    return AgentConfig(hidden=a.hidden, hidden_layers=a.hidden_layers,
                       learning_rate=a.learning_rate, alpha=a.alpha, gamma=a.gamma, tau=a.tau,
                       actor_update_frequency=a.actor_update_frequency,
                       batch_size=a.batch_size, weighted_critic=a.weighted_critic)


def decorr_config(cfg):
    c = cfg.decorr
    return DecorrConfig(M=c.M, inner_iters=c.inner_iters, lr=c.learning_rate,
                        momentum=c.momentum, weight_decay=c.weight_decay,
                        grad_scale=c.grad_scale, cov_form=c.cov_form,
                        standardize_features=c.standardize, nonnegative=c.nonnegative)


def _seed_int(rng):
    return int(rng.integers(2 ** 63 - 1))


@dataclass
class RunState:
    """Everything the training loop owns."""

    suite: object
    agent: SacAgent
    buffer: ReplayBuffer
    classifier: EnvClassifier
    gate: ClassifierGate
    maps: list
    decorr: DecorrConfig
    explore_rng: np.random.Generator
    eval_seed: int


def init_run(cfg):
    seed = cfg.run.seed
    suite = make_env_suite(cfg)
    d, A, K = suite.train[0].d, suite.train[0].action_dim, suite.K
    init = stream(seed, "init")
    agent = SacAgent(d, A, agent_config(cfg), seed=init, noise_seed=stream(seed, "agent-noise"))
    buffer = ReplayBuffer(cfg.agent.replay_capacity, d, A, K, seed=stream(seed, "buffer-sampling"))
    c = cfg.classifier
    classifier = EnvClassifier(d, K, c.hidden, c.learning_rate, seed=init)
    gate = ClassifierGate(c.warmup_steps, c.accuracy_threshold, c.max_inner_iters)
    maps = sample_maps(d, cfg.decorr.M, stream(seed, "rff"))
    env_rng = stream(seed, "env")
    for k, env in enumerate(suite.train):
        env.reset(seed=[_seed_int(env_rng), k])
    return RunState(suite, agent, buffer, classifier, gate, maps, decorr_config(cfg),
                    stream(seed, "explore"), _seed_int(stream(seed, "eval")))


def evaluate(state, episodes):
    """Mean/std of deterministic-policy returns per evaluation mode."""
    out = {}
    for mode, envs in state.suite.eval_envs.items():
        returns = np.concatenate([
            evaluate_return(state.agent.deterministic_policy, env, episodes,
                            [state.eval_seed, i]).returns
            for i, env in enumerate(envs)])
        out[mode] = (float(returns.mean()), float(returns.std()))
    return out


def save_checkpoint(agent, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("policy", "q1", "q2"):
        tmp = directory / f"{name}.txt.tmp"
        getattr(agent, name).save(tmp)
        tmp.replace(directory / f"{name}.txt")


def load_policy(directory):
    return Mlp.load(Path(directory) / "policy.txt")


def correlation_reports(state, cfg):
    """Raw, uniform-p and saliency-p weighted correlation reports on fresh training states."""
    rng = stream(cfg.run.seed, "report")
    n_per = max(1, cfg.run.report_samples // state.suite.K)
    X, E = [], []
    for k, env in enumerate(state.suite.train):
        if hasattr(env, "sample_states"):
            X.append(env.sample_states(n_per, rng))
        else:
            env.reset(seed=[_seed_int(rng), k])
            rows = [env.reset() if i == 0 else env.step(rng.uniform(-1, 1, env.action_dim))[0]
                    for i in range(n_per)]
            X.append(np.array(rows))
        E.append(np.full(n_per, k))
    X, E = np.vstack(X), np.concatenate(E)
    batch = FeatureBatch(X, np.eye(state.suite.K)[E])
    idx = state.suite.train[0].changed_feature_index
    d = X.shape[1]
    if state.classifier.ever_passed:
        p_sal = feature_probs(saliency_map(state.classifier, batch))
    else:
        p_sal = np.full(d, 1.0 / d)
    w_uni = optimize_weights(batch, state.maps, np.full(d, 1.0 / d), state.decorr).weights
    w_sal = optimize_weights(batch, state.maps, p_sal, state.decorr).weights
    return {
        "raw": correlation_matrix(batch, changed_feature_index=idx),
        "uniform": correlation_matrix(batch, w_uni, changed_feature_index=idx),
        "saliency": correlation_matrix(batch, w_sal, changed_feature_index=idx),
    }, p_sal


def _fmt(x):
    if x is None:
        return ""
    return repr(float(x))


def csv_digest(out_dir):
    h = hashlib.sha256()
    files = {}
    for name in CSV_FILES:
        path = Path(out_dir) / name
        if path.exists():
            files[name] = sha256_file(path)
            h.update(f"{name}:{files[name]}\n".encode())
    return h.hexdigest(), files


def _manifest(cfg, state, status, extra=None):
    return {
        "status": status,
        "config": cfg.to_dict(),
        "build": build_id(),
        "rng_algorithm": RNG_ALGORITHM,
        "rng_streams": ["env", "init", "agent-noise", "buffer-sampling", "rff", "explore",
                        "eval", "report"],
        "rff_maps": [m.to_dict() for m in state.maps],
        "env_spec": {k: (list(v) if isinstance(v, tuple) else v)
                     for k, v in state.suite.spec.items()},
        **(extra or {}),
    }


def run_experiment(cfg, trace=False):
    """Train one arm and write all artifacts under ``cfg.run.output_dir``.

    Returns the manifest dict. Raises :class:`RunDiverged` on a
    non-finite update, after writing the partial CSVs and a manifest
    with ``status = "diverged"``.
    """
    cfg.validate()
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = init_run(cfg)
    write_json(out / "manifest.json", _manifest(cfg, state, "incomplete"))

    agent, buffer, suite = state.agent, state.buffer, state.suite
    d = suite.train[0].d
    K = suite.K
    onehots = np.eye(K)
    env_states = [env.state if getattr(env, "state", None) is not None else env._state()
                  for env in suite.train]
    step_rows, acc_rows, return_rows = [], [], []
    status, failed_step = "complete", None

    def record_eval(step):
        for mode, (mean, std) in evaluate(state, cfg.run.eval_episodes).items():
            return_rows.append({"step": step, "mode": mode, "mean": _fmt(mean), "std": _fmt(std)})

    for t in range(1, cfg.run.total_steps + 1):
        k = t % K
        env, s = suite.train[k], env_states[k]
        if t <= cfg.run.random_steps:
            a = state.explore_rng.uniform(-1, 1, env.action_dim)
        else:
            a = agent.act(s)
        s_next, r, done = env.step(a)
        buffer.push(Transition(s, a, r, s_next, done, onehots[k]))
        env_states[k] = env.reset() if done else s_next

        if len(buffer) >= cfg.agent.batch_size:
            try:
                rep = train_step(agent, buffer, state.classifier, state.gate, state.decorr, t,
                                 state.maps, cfg.run.method, cfg.classifier.signed_saliency)
            except DivergenceError as exc:
                logger.error("divergence at step %d: %s", t, exc)
                status, failed_step = "diverged", t
                break
            row = {"step": t, "q_loss": _fmt(rep.q_loss), "policy_loss": _fmt(rep.policy_loss),
                   "objective_initial": _fmt(rep.objective_initial),
                   "objective_final": _fmt(rep.objective_final),
                   "accuracy": _fmt(rep.accuracy), "classifier_updated": int(rep.classifier_updated),
                   "weight_fallback": int(rep.weight_fallback)}
            row.update({f"p_{i}": _fmt(v) for i, v in enumerate(rep.p)})
            if trace:
                w = rep.weights
                row.update({"w_min": _fmt(w.min()), "w_max": _fmt(w.max()),
                            "w_ess": _fmt(w.sum() ** 2 / np.sum(w * w))})
            step_rows.append(row)
            if cfg.run.method == "sgfd" and np.isfinite(rep.accuracy):
                acc_rows.append({"step": t, "accuracy": _fmt(rep.accuracy),
                                 "updated": int(rep.classifier_updated)})

        if t % cfg.run.checkpoint_every == 0:
            save_checkpoint(agent, out / "checkpoints")
        if t % cfg.run.eval_every == 0:
            record_eval(t)

    step_fields = ["step", "q_loss", "policy_loss", "objective_initial", "objective_final",
                   "accuracy", "classifier_updated", "weight_fallback"]
    step_fields += [f"p_{i}" for i in range(d)]
    if trace:
        step_fields += ["w_min", "w_max", "w_ess"]
    write_csv(out / "steps.csv", step_fields, step_rows)
    write_csv(out / "classifier_accuracy.csv", ["step", "accuracy", "updated"], acc_rows)

    if status == "diverged":
        write_csv(out / "returns.csv", ["step", "mode", "mean", "std"], return_rows)
        digest, files = csv_digest(out)
        manifest = _manifest(cfg, state, "diverged",
                             {"failed_step": failed_step, "csv_sha256": files, "hash": digest})
        write_json(out / "manifest.json", manifest)
        raise RunDiverged(failed_step, manifest)

    if cfg.run.total_steps % cfg.run.eval_every:
        record_eval(cfg.run.total_steps)
    save_checkpoint(agent, out / "checkpoints")
    write_csv(out / "returns.csv", ["step", "mode", "mean", "std"], return_rows)

    reports, p_sal = correlation_reports(state, cfg)
    for name, rep in reports.items():
        rep.to_csv(out / f"correlation_{name}.csv")
    write_json(out / "correlations.json", {name: rep.to_json() for name, rep in reports.items()})

    final = {}
    for row in return_rows:
        if row["step"] == cfg.run.total_steps:
            final[row["mode"]] = float(row["mean"])
    digest, files = csv_digest(out)
    manifest = _manifest(cfg, state, "complete", {
        "final_returns": final,
        "classifier_ever_passed": bool(state.classifier.ever_passed),
        "classifier_updates": int(state.classifier.n_updates),
        "report_feature_probs": [float(v) for v in p_sal],
        "csv_sha256": files,
        "hash": digest,
    })
    write_json(out / "manifest.json", manifest)
    return manifest


def evaluate_checkpoint(cfg, checkpoint_dir, episodes=None, seed=None):
    """Deterministic returns of a saved policy on the config's evaluation suites."""
    state = init_run(cfg)
    policy = load_policy(checkpoint_dir)
    state.agent.policy.set_params(policy.params)
    if seed is not None:
        state.eval_seed = int(seed)
    return evaluate(state, episodes or cfg.run.eval_episodes)
