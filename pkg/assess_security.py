#!/usr/bin/env python3
"""Static security assessment pipeline: load flow, dataset generation, Lasso training, ranking.

Subcommands:
  flow   solve the base case and print the solution as JSON
  gen    generate the N-1 dataset (dataset.csv, dataset.json, operating_point.json, run_config.json)
  train  fit the per-bucket and per-contingency models (assessor/)
  rank   predict and rank every contingency at an operating point (ranking.csv, ranking.json)
  eval   compare predictions with load-flow results (evaluation.csv, evaluation.json, ranking_<factor>.csv)
"""

import argparse
import json
import logging
import os
import sys

from common.assessor import (
    OperatingPoint,
    evaluate,
    load_assessor,
    operating_point_from_flow,
    save_assessor,
    save_evaluation,
    screen_and_rank,
    train_assessor,
)
from common.casefetch import resolve_case
from common.config import CONFIG_KEYS, RunConfig, load_config, save_config
from common.helpers import REPO_ROOT, dump_json, get_version, init, read_json, utc_timestamp, write_json
from common.netmodel import network_fingerprint, read_case, scale_loads
from common.powerflow import solve_nr
from common.scenario import (
    enumerate_contingencies,
    fixed_controls,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_by_bucket,
)

ASSESSOR_DIR = "assessor"
DEFAULT_CONFIG = REPO_ROOT / "run_config.json"
OPERATING_POINT = "operating_point.json"
RUN_CONFIG = "run_config.json"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_network(cfg):
    path = resolve_case(cfg.case)
    logging.info(f"Reading case {path}")
    return read_case(path)


def _timestamp(cfg):
    return utc_timestamp() if cfg.timestamp else None


def cmd_flow(cfg, args):
    net = _load_network(cfg)
    sol = solve_nr(scale_loads(net, args.load_factor), cfg.solver_options())
    sys.stdout.write(dump_json(sol.to_dict(net)))
    if not sol.converged:
        logging.warning(f"Load flow did not converge after {sol.iterations} iterations")
    return 0


def cmd_gen(cfg, args):
    net = _load_network(cfg)
    ts = generate_dataset(net, cfg.dataset_config(), seed=cfg.seed, jobs=cfg.jobs)
    save_dataset(ts, cfg.out, timestamp=_timestamp(cfg))
    save_config(os.path.join(cfg.out, RUN_CONFIG), cfg)
    controls = fixed_controls(net, ts.config.ranges, cfg.seed)
    point = operating_point_from_flow(net, controls, solver=cfg.solver_options())
    write_json(os.path.join(cfg.out, OPERATING_POINT), point.to_dict())
    return 0


def cmd_train(cfg, args):
    net = _load_network(cfg)
    ts = load_dataset(args.dataset or cfg.out, expected_fingerprint=network_fingerprint(net))
    buckets = cfg.bucket_list()
    a = train_assessor(
        split_by_bucket(ts, buckets),
        enumerate_contingencies(net),
        buckets=buckets,
        cfg=cfg.lasso_config(),
        limits=ts.config.limits,
        base_mva=net.base_mva,
        granularity=cfg.model_granularity,
        min_cell_samples=cfg.min_cell_samples,
    )
    save_assessor(a, args.assessor or os.path.join(cfg.out, ASSESSOR_DIR), timestamp=_timestamp(cfg))
    return 0


def cmd_rank(cfg, args):
    net = _load_network(cfg)
    a = load_assessor(args.assessor or os.path.join(cfg.out, ASSESSOR_DIR), network_fingerprint(net))
    point = OperatingPoint.from_dict(read_json(args.point or os.path.join(cfg.out, OPERATING_POINT)))
    report = screen_and_rank(a, point)
    os.makedirs(cfg.out, exist_ok=True)
    report.to_csv(os.path.join(cfg.out, "ranking.csv"))
    write_json(os.path.join(cfg.out, "ranking.json"), report.to_dict())
    return 0


def cmd_eval(cfg, args):
    net = _load_network(cfg)
    fingerprint = network_fingerprint(net)
    a = load_assessor(args.assessor or os.path.join(cfg.out, ASSESSOR_DIR), fingerprint)
    ts = load_dataset(args.dataset or cfg.out, expected_fingerprint=fingerprint)
    report = evaluate(a, net, split_by_bucket(ts, a.buckets), anchor_factors=cfg.anchor_factors, cfg=ts.config)
    save_evaluation(report, cfg.out, timestamp=_timestamp(cfg))
    return 0


COMMANDS = {
    "flow": cmd_flow,
    "gen": cmd_gen,
    "train": cmd_train,
    "rank": cmd_rank,
    "eval": cmd_eval,
}


def _epilog():
    width = max(len(key) for key in CONFIG_KEYS)
    lines = ["config keys (JSON file given with --config; flags override):"]
    lines += [f"  {key.ljust(width)}  {text}" for key, text in CONFIG_KEYS.items()]
    return "\n".join(lines)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file")
    common.add_argument("--case", help="case file path or name (case14, case118, case300)")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--samples", type=int, dest="samples_per_contingency", help="samples per contingency")
    common.add_argument("--load-min", type=float, dest="load_min", help="lowest load factor")
    common.add_argument("--load-max", type=float, dest="load_max", help="highest load factor")
    common.add_argument("--buckets", help="load buckets, label:lo:hi,...")
    common.add_argument("--granularity", dest="model_granularity", choices=("bucket", "contingency"),
                        help="one model per load bucket, or per bucket and contingency")
    common.add_argument("--lambda-count", type=int, dest="lambda_count", help="regularization path length")
    common.add_argument("--msa-steps", type=int, dest="msa_steps", help="adaptive reweighting steps")
    common.add_argument("--jobs", type=int, help="worker processes (0 = all CPUs)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--no-timestamp", action="store_true", help="leave generation timestamps out of outputs")
    common.add_argument("--log-level", dest="log_level", help="overrides LOG_LEVEL")

    parser = _Parser(
        prog="assess_security.py",
        description=__doc__.splitlines()[0],
        epilog=_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=get_version())
    sub = parser.add_subparsers(dest="command", required=True)

    flow = sub.add_parser("flow", parents=[common], help="solve the base-case load flow",
                          epilog=_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    flow.add_argument("--load-factor", type=float, default=1.0, dest="load_factor", help="load multiplier")
    sub.add_parser("gen", parents=[common], help="generate the N-1 dataset",
                   epilog=_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    for name, text in (("train", "train the assessment models"), ("eval", "evaluate against load flow")):
        p = sub.add_parser(name, parents=[common], help=text,
                           epilog=_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--dataset", help="dataset directory (default: --out)")
        p.add_argument("--assessor", help="assessor directory (default: <out>/assessor)")
    rank = sub.add_parser("rank", parents=[common], help="rank contingencies at an operating point",
                          epilog=_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    rank.add_argument("--assessor", help="assessor directory (default: <out>/assessor)")
    rank.add_argument("--point", help="operating point JSON (default: <out>/operating_point.json)")
    return parser


def resolve_config(args):
    path = args.config or DEFAULT_CONFIG
    cfg = load_config(path) if args.config or os.path.exists(path) else RunConfig()
    overrides = {
        key: getattr(args, key)
        for key in ("case", "seed", "samples_per_contingency", "load_min", "load_max", "buckets",
                    "model_granularity", "lambda_count", "msa_steps", "jobs", "out")
    }
    if args.no_timestamp:
        overrides["timestamp"] = False
    return cfg.override(**overrides)


def _report(exc):
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _report(exc)
        return 2
    init(args.log_level)
    try:
        cfg = resolve_config(args)
        logging.info(f"grid-ossa {get_version()}: {args.command} on {cfg.case}")
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:
        logging.debug("Command failed", exc_info=True)
        _report(exc)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
