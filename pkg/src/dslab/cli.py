"""Command-line entry point: ``python -m dslab <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import dqn, harness
from .checkpoint import FeatureCheckpoint
from .config import load_config
from .envs import observation_dim
from .errors import ConfigError, ContractViolation, DegenerateInputError, NonFiniteError, NotReadyError

log = logging.getLogger("dslab")


def _parse_set(items):
    out = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(key or "--set", "expected KEY=VALUE")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config(args, **extra):
    overrides = _parse_set(args.set)
    if args.env is not None:
        overrides["env_id"] = args.env
    if args.seed is not None:
        overrides["seed"] = args.seed
    overrides.update({k: v for k, v in extra.items() if v is not None})
    return load_config(args.config, **overrides)


def _out(args, default):
    out = Path(args.out) if args.out else Path("runs") / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args):
    cfg = _config(args, algorithm=args.algorithm, train_episodes=args.episodes)
    out = _out(args, "train")
    res = dqn.train(cfg.task, cfg)
    harness.write_training_artifacts(res, out)
    harness.write_json(out / "config.json", cfg.to_dict())
    if not args.no_plot:
        from . import plotting

        plotting.plot_training(res.log, out / "training.png", f"{cfg.env_id} / {cfg.algorithm}")
        plotting.plot_corr_traces({cfg.algorithm: [r.mean_pair_corr for r in res.log]}, out / "corr_trace.png")
    print(f"final mean pair correlation {res.final_corr:.4f}; checkpoint from episode {res.selection_episode}")
    print(f"wrote {out}")
    return 0


def cmd_transfer(args):
    cfg = _config(args, runs=args.runs)
    ckpt = FeatureCheckpoint.load(args.ckpt)
    out = _out(args, "transfer")
    summary, results = harness.run_transfer_protocol(ckpt, cfg, out_dir=out)
    if not args.no_plot:
        from . import plotting

        plotting.plot_transfer_lengths({f"run {i}": r.lengths for i, r in enumerate(results)},
                                       out / "transfer.png", cfg.exit_window)
    print(f"episodes to exit: mean {summary.mean:.1f}, std {summary.std:.1f}, runs {summary.episodes_to_exit}")
    return 0


def cmd_trials(args):
    cfg = _config(args, algorithm=args.algorithm, trials=args.trials, runs=args.runs)
    out = _out(args, "trials")
    report = harness.run_trials(cfg, jobs=args.jobs, out_dir=out)
    if not args.no_plot:
        from . import plotting

        plotting.plot_trial_report(report.to_dict(), out / "trial_report.png")
    flag = " (incomplete)" if report.incomplete else ""
    print(f"grand mean {report.grand_mean}, std {report.std}{flag}")
    return 0


def cmd_ablate(args):
    cfg = _config(args, runs=args.runs)
    out = _out(args, "ablate")
    cells = harness.run_ablation_lambda_k(cfg, harness.parse_grid(args.lambdas, args.ks), jobs=args.jobs,
                                          trials=args.trials, out_dir=out)
    if not args.no_plot:
        from . import plotting

        plotting.plot_ablation(cells, out / "ablation.png")
    for c in cells:
        r = c.report
        print(f"lambda_max={c.lambda_max:g} k={c.k}: "
              + (f"{r.grand_mean:.1f} +/- {r.std:.1f}" if r and r.grand_mean is not None else f"failed ({c.error})"))
    return 0


def cmd_baseline_raw(args):
    cfg = _config(args, runs=args.runs)
    out = _out(args, "baseline-raw")
    summary, results = harness.run_raw_baseline(cfg, out_dir=out)
    if not args.no_plot:
        from . import plotting

        plotting.plot_transfer_lengths({f"run {i}": r.lengths for i, r in enumerate(results)},
                                       out / "transfer.png", cfg.exit_window)
    print(f"raw-feature episodes to exit: {summary.episodes_to_exit} (cap {summary.cap})")
    return 0


def cmd_corr(args):
    cfg = _config(args)
    ckpt = FeatureCheckpoint.load(args.ckpt)
    if ckpt.obs_dim != observation_dim(cfg.env_id):
        raise ConfigError("ckpt", f"checkpoint expects {ckpt.obs_dim}-dim observations")
    value = harness.measure_mean_correlation(ckpt, harness.probe_set(cfg), args.pairing, k=cfg.clusters,
                                             seed=cfg.seed)
    print(repr(float(value)))
    return 0


def cmd_gridworld_demo(args):
    cfg = _config(args, env_id="gridworld")
    out = _out(args, "gridworld-demo")
    doc = harness.gridworld_demo(cfg, out_dir=out, runs=args.runs)
    if not args.no_plot:
        from . import plotting

        rows = harness.read_csv(out / "transfer_log.csv")
        runs = {}
        for row in rows:
            runs.setdefault(f'{row["features"]} run {row["run_id"]}', []).append(int(row["length"]))
        plotting.plot_transfer_lengths(runs, out / "gridworld_demo.png", cfg.exit_window)
    for name in ("trained", "high_corr"):
        d = doc[name]
        print(f"{name}: corr {d['mean_pair_corr']:.3f}, episodes to exit {d['episodes_to_exit']}, "
              f"final length {d['final_moving_avg_length']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--env", choices=("gridworld", "mountaincar", "minibreakout"))
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for independent trials")
    common.add_argument("--no-plot", action="store_true", help="skip the PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dslab", description="Correlation-regularized DQN features and LFA transfer.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", parents=[common], help="one DS-DQN or vanilla DQN training")
    s.add_argument("--algorithm", choices=("dsdqn", "vanilla"))
    s.add_argument("--episodes", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("transfer", parents=[common], help="LFA transfer from a feature checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--runs", type=int)
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("trials", parents=[common], help="full trial protocol")
    s.add_argument("--algorithm", choices=("dsdqn", "vanilla"))
    s.add_argument("--trials", type=int)
    s.add_argument("--runs", type=int)
    s.set_defaults(func=cmd_trials)

    s = sub.add_parser("ablate", parents=[common], help="lambda_max x k sweep")
    s.add_argument("--lambdas", type=float, nargs="+", default=[0.001, 0.01, 0.1])
    s.add_argument("--ks", type=int, nargs="+", default=[4, 8])
    s.add_argument("--trials", type=int, default=3)
    s.add_argument("--runs", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("baseline-raw", parents=[common], help="LFA on raw observations")
    s.add_argument("--runs", type=int)
    s.set_defaults(func=cmd_baseline_raw)

    s = sub.add_parser("corr", parents=[common], help="mean pair correlation of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pairing", choices=("all_pairs", "clustered"), default="all_pairs")
    s.set_defaults(func=cmd_corr)

    s = sub.add_parser("gridworld-demo", parents=[common], help="low vs high correlation features on gridworld")
    s.add_argument("--runs", type=int, default=1)
    s.set_defaults(func=cmd_gridworld_demo)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except (ContractViolation, DegenerateInputError, NotReadyError, NonFiniteError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
