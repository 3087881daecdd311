"""Command-line front end.

Subcommands::

    advalign train   --config PATH [--seed N]
    advalign offline --config PATH --data PATH [--seed N]
    advalign sample  --config PATH --episodes N --out PATH [--curated]
    advalign ablate  --study NAME --config PATH [--jobs N]
    advalign verify  [--output PATH] [--corrupt-apa-gradient] [--skip-rate]

Run directories live under ``$ADVALIGN_RUN_ROOT`` (default ``./runs``).

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 training abort (or any failed ablation cell).
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import config as config_mod
from .exceptions import AdvalignError, ConfigError, NonFiniteParameters
from .mdp import TokenMdp, random_policy, random_token_mdp
from .rollouts import RolloutBatch, sample_rollouts
from .suite import RESULT_COLUMNS, STUDIES, cell_summary, curated_logging_policy, make_cells, run_cells
from .trainer import train, train_offline
from .verify import build_report, run_checks

RUN_ROOT_ENV = "ADVALIGN_RUN_ROOT"
EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
RUN_FILES = ("metrics.csv", "policy.json", "config.json")


def run_root():
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _err(msg):
    print(msg, file=sys.stderr)


def _config_error(exc, path):
    where = f"{path}:{exc.line}" if exc.line else str(path)
    _err(f"config error: {where}: {exc}")
    return EXIT_CONFIG


def build_mdp(cfg):
    m = cfg.mdp
    if m["path"]:
        with open(m["path"]) as fh:
            return TokenMdp.from_json(fh.read())
    return random_token_mdp(m["vocab_size"], m["horizon"], seed=m["reward_seed"],
                            suffix_len=m["suffix_len"], gamma=m["gamma"])


def build_initial_policy(cfg, mdp):
    p = cfg.policy
    return random_policy(mdp, seed=p["seed"], scale=p["scale"], kind=p["kind"],
                         eos_bias=p["eos_bias"], frozen=True)


def _load(path, seed=None, **train_overrides):
    cfg = config_mod.load(path)
    if seed is not None:
        train_overrides["seed"] = seed
    if train_overrides:
        cfg = cfg.with_overrides("train", **train_overrides)
    return cfg


def _write_run(cfg, policy, metrics):
    out = run_root() / cfg.run_name()
    out.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(out / "metrics.csv")
    doc = {"kind": policy.kind, "theta": policy.theta.tolist(), **policy.to_dict()}
    (out / "policy.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    (out / "config.json").write_text(cfg.to_json())
    return out


def _train_and_write(cfg, logged=None):
    try:
        mdp = build_mdp(cfg)
        pi_init = build_initial_policy(cfg, mdp)
        if logged is not None:
            policy, metrics = train_offline(mdp, pi_init, logged(mdp), cfg.train_config())
        else:
            policy, metrics = train(mdp, pi_init, cfg.train_config())
    except NonFiniteParameters as exc:
        _err(f"training aborted: {exc}; diagnostic keys: {sorted(exc.dump)}")
        return EXIT_ABORT
    except (AdvalignError, ValueError, OSError) as exc:
        _err(f"training aborted: {type(exc).__name__}: {exc}")
        return EXIT_ABORT
    out = _write_run(cfg, policy, metrics)
    print(out)
    return EXIT_OK


def cmd_train(args):
    try:
        cfg = _load(args.config, args.seed)
    except ConfigError as exc:
        return _config_error(exc, args.config)
    if cfg.train["mode"] == "offline":
        path = cfg.train["offline_data_path"]
        return _train_and_write(cfg, lambda mdp: RolloutBatch.from_jsonl(mdp, path))
    return _train_and_write(cfg)


def cmd_offline(args):
    try:
        cfg = _load(args.config, args.seed, mode="offline", offline_data_path=str(args.data))
    except ConfigError as exc:
        return _config_error(exc, args.config)
    return _train_and_write(cfg, lambda mdp: RolloutBatch.from_jsonl(mdp, args.data))


def cmd_sample(args):
    """Write logged episodes from the config's initial (or curated) policy as JSONL."""
    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        return _config_error(exc, args.config)
    mdp = build_mdp(cfg)
    policy = build_initial_policy(cfg, mdp)
    tag = "pi_init"
    if args.curated:
        policy = curated_logging_policy(mdp, policy, cfg.offline["skew"])
        tag = f"curated-skew{cfg.offline['skew']:g}"
    episodes = args.episodes or cfg.offline["episodes"]
    batch = sample_rollouts(mdp, policy, episodes, seed=cfg.train["seed"], tag=tag)
    batch.to_jsonl(mdp, args.out)
    print(args.out)
    return EXIT_OK


def cmd_ablate(args):
    try:
        cfg = config_mod.load(args.config)
    except ConfigError as exc:
        return _config_error(exc, args.config)
    seeds = args.seeds if args.seeds else cfg.suite["seeds"]
    cells = make_cells(args.study, seeds, base_loss=cfg.loss, base_train=cfg.train, offline=cfg.offline)
    outcomes = run_cells(cells, jobs=args.jobs)

    out = run_root() / f"ablate-{args.study}-{cfg.config_hash()}"
    out.mkdir(parents=True, exist_ok=True)
    failures = []
    with open(out / "results.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for cell, outcome in zip(cells, outcomes):
            cell_dir = out / "cells" / cell.variant.name / cell.entry.name / f"seed{cell.seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "cell.json").write_text(json.dumps(cell_summary(cell), indent=2, sort_keys=True) + "\n")
            if outcome.error:
                failures.append({**cell_summary(cell), "error": outcome.error})
                (cell_dir / "error.txt").write_text(outcome.detail or outcome.error)
                continue
            for row in outcome.rows:
                writer.writerow([row[c] if c in RESULT_COLUMNS[:4] else repr(float(row[c]))
                                 for c in RESULT_COLUMNS])
    (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")
    print(out)
    if failures:
        _err(f"{len(failures)} of {len(cells)} cells failed; see {out / 'failures.json'}")
        return EXIT_ABORT
    return EXIT_OK


def cmd_verify(args):
    checks = run_checks(corrupt_apa_gradient=args.corrupt_apa_gradient, include_rate=not args.skip_rate)
    report = build_report(checks)
    text = json.dumps(report, indent=2, sort_keys=True, default=float)
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    for c in checks:
        _err(c.line())
    return EXIT_OK if report["passed"] else EXIT_CHECK_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="advalign", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="online policy iteration from a JSON config")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("offline", help="policy iteration over a logged JSONL dataset")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_offline)

    p = sub.add_parser("sample", help="write logged episodes for offline training")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--episodes", type=int)
    p.add_argument("--curated", action="store_true", help="sample from the skewed-support logging policy")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ablate", help="run a study grid over the standard suite")
    p.add_argument("--study", required=True, choices=sorted(STUDIES))
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run the oracle verification suite")
    p.add_argument("--output", type=Path)
    p.add_argument("--corrupt-apa-gradient", action="store_true",
                   help="flip the APA gradient sign to demonstrate that the check catches it")
    p.add_argument("--skip-rate", action="store_true", help="omit the sample-size scaling study")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
