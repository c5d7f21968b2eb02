#!/usr/bin/env python

import argparse
import json
import logging
import os
import pickle
import sys

import numpy as np

from .agent import Policy, evaluate
from .checkpoint import load_checkpoint
from .config import OPTIMIZERS, TrainConfig, from_dict, load_config, with_overrides
from .envs import PROBLEMS, make_env
from .errors import SafeDynError
from .harness import load_sweep_spec, report, run_single, run_sweep
from .lbsgd import bench_optimizer, export_ledger

logger = logging.getLogger(__name__)

OUT_ENV = "SAFEDYN_OUT"


def _output_root(args):
    return args.out or os.environ.get(OUT_ENV, "runs")


def _train_config(args):
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = with_overrides(config, {"seed": args.seed})
    return config


def cmd_train(args):
    config = _train_config(args)
    out = _output_root(args)
    metrics = run_single(config, out)
    final = metrics.final
    if metrics.aborted:
        raise SafeDynError(f"run aborted at epoch {final.epoch}: {final.reason}")
    logger.info(f"Run finished: J_hat={final.J_hat:.3f} Jc_hat={final.Jc_hat:.2f} "
                f"accumulated cost={final.accumulated_cost:.1f}; metrics in {out}")
    return 0


def cmd_sweep(args):
    if not args.config:
        raise SafeDynError("sweep needs --config pointing to a sweep file")
    spec = load_sweep_spec(args.config, output_dir=_output_root(args))
    if args.seed is not None:
        spec.seeds = [args.seed]
    if args.workers is not None:
        spec.workers = args.workers
    manifest = run_sweep(spec)
    failed = [e for e in manifest["runs"] if e["status"] != "completed"]
    for entry in failed:
        logger.warning(f"{entry['path']} failed: {entry['reason']}")
    return 0


def cmd_evaluate(args):
    payload = load_checkpoint(args.checkpoint)
    config = from_dict(TrainConfig, payload["config"])
    if args.config:
        config = load_config(args.config)
    env = make_env(config.env)
    policy = Policy(env.spec, config.policy.hidden, config.policy.init_log_std)
    policy.load_state_dict(payload["policy"])
    seed = args.seed if args.seed is not None else config.seed
    J_hat, Jc_hat = evaluate(policy, env, args.episodes, np.random.default_rng(seed))
    result = {"checkpoint": args.checkpoint, "epoch": payload.get("epoch"), "episodes": args.episodes,
              "seed": seed, "J_hat": J_hat, "Jc_hat": Jc_hat, "budget": env.spec.budget}
    out = _output_root(args)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "evaluation.json"), "w") as f:
        json.dump(result, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"J_hat={J_hat:.3f} Jc_hat={Jc_hat:.2f} over {args.episodes} episodes")
    return 0


def cmd_bench_opt(args):
    config = load_config(args.config) if args.config else TrainConfig()
    result = bench_optimizer(args.problem, args.optimizer, iterations=args.iterations, noise=args.noise,
                             seed=args.seed or 0, barrier=config.barrier, lagrangian=config.lagrangian)
    out = _output_root(args)
    os.makedirs(out, exist_ok=True)
    stem = f"{args.problem}-{args.optimizer}"
    export_ledger(result.ledger, os.path.join(out, f"{stem}-ledger.jsonl"))
    with open(os.path.join(out, f"{stem}.json"), "w") as f:
        json.dump(result.summary(), f, indent=2, sort_keys=True)
        f.write("\n")
    return 0


def cmd_report(args):
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.manifest)), "report")
    report(args.manifest, out, plots=not args.no_plots)
    return 0


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (overrides the config)")
    common.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV} or ./runs)")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="safedyn",
                                     description="Pessimistic model-based safe reinforcement learning.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("train", parents=[common], help="single training run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", parents=[common], help="seeds x arms sweep from a sweep file (--config)")
    p.add_argument("--workers", type=int, default=None, help="parallel processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", parents=[common], help="evaluate a policy checkpoint")
    p.add_argument("--checkpoint", required=True, help="run checkpoint (.pkl)")
    p.add_argument("--episodes", type=int, default=10, help="evaluation episodes")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-opt", parents=[common], help="optimizer benchmark on an analytic problem")
    p.add_argument("--problem", required=True, choices=sorted(PROBLEMS))
    p.add_argument("--optimizer", default="lbsgd", choices=OPTIMIZERS)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--noise", type=float, default=None, help="evaluation-noise scale")
    p.set_defaults(func=cmd_bench_opt)

    p = sub.add_parser("report", parents=[common], help="tables and plots from a sweep manifest")
    p.add_argument("--manifest", required=True, help="manifest.json written by sweep")
    p.add_argument("--no-plots", action="store_true", help="skip PNG plots")
    p.set_defaults(func=cmd_report)
    return parser


def cli(argv=None):
    """
    Parses `argv` and runs one subcommand.

    Returns:
        int: 0 on success, 1 with a one-line diagnostic on failure, 2 on usage errors.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except (SafeDynError, ValueError, FileNotFoundError, pickle.UnpicklingError) as e:
        print(f"safedyn {args.command}: error: {e}", file=sys.stderr)
        return 1


def main(args=None):
    """Entry point of the safedyn command."""
    return cli(sys.argv[1:] if args is None else args)


if __name__ == '__main__':
    sys.exit(main(sys.argv[1:]))
