"""Command line entry point: ``advest {train,sweep,profile-variance,verify,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from functools import partial
from pathlib import Path

from advest import __version__
from advest.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from advest.config import ExperimentConfig, load_config, write_config
from advest.envs import make_env
from advest.experiments import (DEFAULT_PROFILE_SAMPLES, profile_variance, run_sweep, write_sweep,
                                zero_value_output)
from advest.ppo import ConfigError, Trainer, evaluate
from advest.verify import format_table, run_checks

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.advest"
RUNLOG_NAME = "runlog.csv"

log = logging.getLogger("advest")


def _experiment(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "budget_steps", None) is not None:
        changes["total_env_steps"] = args.budget_steps
    if changes:
        try:
            config = config.with_trainer(**changes)
        except ConfigError as exc:
            raise ConfigError(f"command line: {exc}") from None
    return config


def _out_dir(args, config: ExperimentConfig) -> Path:
    out = Path(args.out or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, config: ExperimentConfig, command: str, **extra):
    data = {"advest_version": __version__, "command": command, "config_hash": config.config_hash(),
            "config": config.to_dict(), **extra}
    (out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _trainer(config: ExperimentConfig) -> Trainer:
    return Trainer(config.trainer, partial(make_env, config.env))


def cmd_train(args) -> int:
    config = _experiment(args)
    out = _out_dir(args, config)
    trainer = _trainer(config)
    if args.fixed_clock:
        trainer.freeze_clock()
    digest = config.config_hash()
    if args.resume:
        header = load_checkpoint(args.resume, trainer, digest)
        log.info("resumed from %s at env step %d", args.resume, header["env_steps"])
    every = args.checkpoint_every if args.checkpoint_every is not None else config.checkpoint_every
    ckpt_path = out / CHECKPOINT_NAME
    csv_path = out / RUNLOG_NAME

    def on_iteration(tr: Trainer, row: dict):
        if every and tr.iteration % every == 0:
            tr.log.write_csv(csv_path)
            save_checkpoint(ckpt_path, tr, digest)

    trainer.run(on_iteration=on_iteration)
    trainer.log.write_csv(csv_path)
    save_checkpoint(ckpt_path, trainer, digest)
    write_config(config, out / "config.json")
    _manifest(out, config, "train", env_steps=trainer.env_steps, iterations=trainer.iteration,
              artifacts=[RUNLOG_NAME, CHECKPOINT_NAME, "config.json"])
    last = trainer.log.rows[-1] if trainer.log.rows else {}
    print(f"trained {trainer.env_steps} env steps in {trainer.iteration} iterations; "
          f"mean_return_100={last.get('mean_return_100', float('nan')):.3f}; wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _experiment(args)
    out = _out_dir(args, config)
    results = run_sweep(config.env, config.trainer, config.sweep_T, config.sweep_epsilon, config.n_seeds)
    write_sweep(out, results)
    failed = sum(r.error is not None for r in results)
    _manifest(out, config, "sweep", cells=len(results), failed_cells=failed,
              artifacts=["sweep.csv", "heatmap.csv"] + (["failures.csv"] if failed else []))
    print(f"sweep finished: {len(results)} cells, {failed} failed; wrote {out}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_profile(args) -> int:
    config = _experiment(args)
    out = _out_dir(args, config)
    trainer = _trainer(config)
    if args.checkpoint:
        _, state = read_checkpoint(args.checkpoint)
        trainer.load_state_dict(state)
    if args.zero_value:
        zero_value_output(trainer)
    table = profile_variance(trainer, args.samples, exact_values=args.exact_values, seed=config.trainer.seed)
    table.to_csv(out / "profile.csv")
    _manifest(out, config, "profile-variance", samples=args.samples, exact_values=args.exact_values,
              zero_value=args.zero_value, artifacts=["profile.csv"])
    print(f"profiled {len(table)} positions; wrote {out / 'profile.csv'}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_checks(args.filter)
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return EXIT_FAIL
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_eval(args) -> int:
    config = _experiment(args)
    trainer = _trainer(config)
    if args.checkpoint:
        _, state = read_checkpoint(args.checkpoint)
        trainer.load_state_dict(state)
    env = make_env(config.env)
    seed = config.trainer.seed
    mean_return, success = evaluate(trainer.policy, env, args.episodes, seed, greedy=not args.sample)
    print(json.dumps({"episodes": args.episodes, "mean_return": mean_return, "success_rate": success}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advest", description="PPO with partial GAE: training and analysis")
    parser.add_argument("--version", action="version", version=f"advest {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", metavar="PATH", help="JSON experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--budget-steps", type=int, metavar="INT", help="override total_env_steps")
        if out:
            p.add_argument("--out", metavar="DIR", help="output directory (default: config out_dir)")

    p = sub.add_parser("train", help="train one run; writes runlog.csv, checkpoint and manifest")
    common(p)
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint with the same config hash")
    p.add_argument("--checkpoint-every", type=int, metavar="N", help="checkpoint every N iterations")
    p.add_argument("--fixed-clock", action="store_true", help="record wall_clock_s as 0 for byte-identical logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="grid over (T, epsilon, seed); writes sweep.csv and heatmap.csv")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("profile-variance", help="per-position std of truncated GAE at fixed parameters")
    common(p)
    p.add_argument("--checkpoint", metavar="PATH", help="load policy and value parameters from a checkpoint")
    p.add_argument("--samples", type=int, default=DEFAULT_PROFILE_SAMPLES, help="segments per position")
    p.add_argument("--zero-value", action="store_true", help="zero the value net's output layer")
    p.add_argument("--exact-values", action="store_true", help="chain envs: use exact values, fill bias column")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("verify", help="run the identity and oracle checks")
    p.add_argument("--filter", metavar="NAME", help="suite or check name")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="evaluate a policy")
    common(p, out=False)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--sample", action="store_true", help="sample actions instead of acting greedily")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
