"""``sgfd`` command line.

Subcommands::

    sgfd gen     --out DIR [--config F] [--seed S] [--samples N]
    sgfd train   --out DIR [--config F] [--seed S] [--method M] [--steps N] [--trace]
    sgfd eval    --checkpoint DIR [--config F] [--seed S] [--episodes N] [--out DIR]
    sgfd report  --dataset CSV [--weights CSV] [--changed-index I] --out DIR
    sgfd accept  SUITE [SUITE ...]

Exit codes: 0 success, 1 acceptance failure, 2 invalid arguments or
config, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from sgfd._errors import InvalidArgument
from sgfd.agent import METHODS
from sgfd.config import ConfigError, load_config
from sgfd.decorrelation import FeatureBatch
from sgfd.io import read_csv, write_csv, write_json
from sgfd.metrics import correlation_matrix

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _resolve(args):
    """Config file, then env vars, then CLI flags."""
    cfg = load_config(args.config)
    run = {}
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if getattr(args, "method", None) is not None:
        run["method"] = args.method
    if getattr(args, "steps", None) is not None:
        run["total_steps"] = args.steps
    if getattr(args, "out", None) is not None:
        run["output_dir"] = str(args.out)
    if run:
        cfg = cfg.replace("run", **run)
    return cfg.validate()


def cmd_gen(args):
    from sgfd.envs import rollout_dataset
    from sgfd.runner import make_env_suite

    cfg = _resolve(args)
    out = Path(cfg.run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    suite = make_env_suite(cfg)
    (out / "suite.ini").write_text(cfg.to_text())
    write_json(out / "suite.json", {
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in suite.spec.items()},
        "eval_suites": {m: {"train_range": list(s.train_range), "test_values": s.test_values}
                        for m, s in suite.eval_suites.items()},
    })
    data = rollout_dataset(suite, args.samples, cfg.run.seed)
    d, A = data["states"].shape[1], data["actions"].shape[1]
    names = [f"z{j}" for j in range(d)] + [f"a{j}" for j in range(A)] + ["reward", "env"]
    rows = []
    for s, a, r, e in zip(data["states"], data["actions"], data["rewards"], data["env"]):
        vals = [repr(float(v)) for v in (*s, *a, r)] + [int(e)]
        rows.append(dict(zip(names, vals)))
    write_csv(out / "dataset.csv", names, rows)
    print(f"wrote {len(rows)} transitions to {out / 'dataset.csv'}")
    return EXIT_OK


def cmd_train(args):
    from sgfd.runner import RunDiverged, run_experiment

    cfg = _resolve(args)
    try:
        manifest = run_experiment(cfg, trace=args.trace)
    except RunDiverged as exc:
        print(f"error: {exc}; last good checkpoint kept in "
              f"{Path(cfg.run.output_dir) / 'checkpoints'}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps({"hash": manifest["hash"], "final_returns": manifest["final_returns"]}))
    return EXIT_OK


def cmd_eval(args):
    from sgfd.runner import evaluate_checkpoint

    cfg = _resolve(args)
    if not (Path(args.checkpoint) / "policy.txt").exists():
        raise InvalidArgument(f"no policy.txt under {args.checkpoint}")
    result = evaluate_checkpoint(cfg, args.checkpoint, args.episodes, args.seed)
    summary = {mode: {"mean": m, "std": s} for mode, (m, s) in result.items()}
    if args.out is not None:
        write_json(Path(args.out) / "eval.json", {"checkpoint": str(args.checkpoint),
                                                  "returns": summary})
    print(json.dumps(summary))
    return EXIT_OK


def cmd_report(args):
    rows = read_csv(args.dataset)
    if not rows:
        raise InvalidArgument("empty dataset")
    zcols = sorted((c for c in rows[0] if c.startswith("z")), key=lambda c: int(c[1:]))
    X = np.array([[float(r[c]) for c in zcols] for r in rows])
    env = np.array([int(r["env"]) for r in rows]) if "env" in rows[0] else np.zeros(len(rows), int)
    batch = FeatureBatch(X, np.eye(env.max() + 1)[env])
    out = Path(args.out)
    reports = {"raw": correlation_matrix(batch, changed_feature_index=args.changed_index)}
    if args.weights is not None:
        w = np.array([float(r["w"]) for r in read_csv(args.weights)])
        if w.shape != (X.shape[0],):
            raise InvalidArgument(f"weights file has {w.size} rows, dataset has {X.shape[0]}")
        reports["weighted"] = correlation_matrix(batch, w, changed_feature_index=args.changed_index)
    for name, rep in reports.items():
        rep.to_csv(out / f"correlation_{name}.csv")
    write_json(out / "correlations.json", {k: r.to_json() for k, r in reports.items()})
    print(json.dumps({k: r.summary for k, r in reports.items()}))
    return EXIT_OK


def cmd_accept(args):
    from sgfd.acceptance import SUITES, run_suite

    names = list(SUITES) if "all" in args.suites else args.suites
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        print(f"error: unknown suite(s) {unknown}; choose from {['all', *SUITES]}", file=sys.stderr)
        return EXIT_CONFIG
    failed = False
    for name in names:
        for check in run_suite(name):
            print(check.line(), flush=True)
            failed |= not check.passed
    return EXIT_FAIL if failed else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sgfd", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", type=Path, help="sectioned key=value config file")
        p.add_argument("--seed", type=int, help="run seed (u64)")
        p.add_argument("--out", type=Path, required=out_required, help="output directory")

    p = sub.add_parser("gen", help="emit an environment suite and an offline dataset")
    common(p, out_required=True)
    p.add_argument("--samples", type=int, default=500, help="transitions per environment")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="run one experiment arm")
    common(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--trace", action="store_true", help="add weight statistics to steps.csv")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the evaluation suites")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--episodes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="correlation reports from a dataset and optional weights")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--weights", type=Path, help="CSV with a 'w' column, one row per sample")
    p.add_argument("--changed-index", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("accept", help="run acceptance suites")
    p.add_argument("suites", nargs="+", help="suite names or 'all'")
    p.set_defaults(func=cmd_accept)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InvalidArgument, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
