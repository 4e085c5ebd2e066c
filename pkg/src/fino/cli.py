"""Command-line entry point: ``fino <command> [flags]``.

Settings are resolved in three layers: built-in defaults, then the
``--config`` file, then explicit flags. Every output goes under ``--out``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .agent import FinoAgent
from .envs import Dataset, FourCircles, PointMaze, generate_offline_dataset, make_env
from .nn import ContractError
from .pipeline import (
    ConfigError,
    RunConfig,
    TrainingError,
    evaluate,
    finetune_online,
    format_config,
    load_config,
    load_dataset,
    pretrain_offline,
    write_metrics,
)
from .verify import CHECKS, GridSpec, export_log_density, run_check, write_density_csv, write_reports

log = logging.getLogger("fino")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

EPILOG = """\
precedence: flags override keys from --config, which override built-in defaults.
  Commands that continue a run (train-offline after gen-dataset, finetune-online,
  eval, export-plot) use OUT/config.cfg, saved by the previous step, in place of
  the built-in defaults.
outputs: everything is written under --out; with --seeds N, runs go to OUT/seed_<k>.
logging: set FINO_LOG_LEVEL to error, info (default) or debug.
exit codes: 0 success, 1 failed check or training error, 2 usage or config error.
"""

COMMANDS = {
    "gen-dataset": ("generate an offline dataset", ()),
    "train-offline": ("pre-train flow, one-step policy and critic offline", ("eta", "steps")),
    "finetune-online": ("fine-tune a pre-trained agent online", ("eta", "steps")),
    "eval": ("evaluate the latest checkpoint", ()),
    "verify": ("run a numerical check of the noise-injected paths", ("eta", "steps", "check")),
    "export-plot": ("write log-density grids and figures for the latest checkpoint", ()),
}


class UsageError(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fino", description=__doc__.splitlines()[0], epilog=EPILOG,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (help_text, extra) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=EPILOG,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="base random seed")
        p.add_argument("--seeds", type=int, default=1, help="number of independent runs (seed, seed+1, ...)")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--env", help="four-circles, rightward or point-maze")
        if "eta" in extra:
            p.add_argument("--eta", type=float, help="noise scale eta")
        if "steps" in extra:
            p.add_argument("--steps", type=int, help="training steps for this phase")
        if "check" in extra:
            p.add_argument("--check", default="all", choices=(*CHECKS, "all"), help="which check to run")
    return parser


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    """Layer ``--config`` and explicit flags over ``base`` (built-in defaults when None)."""
    base = base or RunConfig()
    config = load_config(args.config, base) if args.config else base
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.env is not None:
        changes["env"] = args.env
    if getattr(args, "eta", None) is not None:
        changes["eta"] = args.eta
    steps = getattr(args, "steps", None)
    if steps is not None and args.command == "train-offline":
        changes["offline_steps"] = steps
    if steps is not None and args.command == "finetune-online":
        changes["online_steps"] = steps
    try:
        config = config.replace(**changes)
        make_env(config.env)
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    return config


def _checkpoint(out: Path, prefer_online=True) -> Path:
    for name in (("checkpoint_online", "checkpoint") if prefer_online else ("checkpoint",)):
        if (out / name / "agent.json").is_file():
            return out / name
    raise UsageError(f"no checkpoint under {out}; run train-offline first")


def _dataset_for(config: RunConfig, out: Path) -> Dataset:
    if not config.dataset and (out / "dataset.bin").is_file():
        data = Dataset.load(out / "dataset.bin")
        if data.env != config.env:
            raise ConfigError(f"{out / 'dataset.bin'} was generated for {data.env}, not {config.env}")
        return data
    return load_dataset(config)


def cmd_gen_dataset(config, out, args):
    data = generate_offline_dataset(make_env(config.env), size=config.dataset_size, seed=config.seed)
    data.save(out / "dataset.bin")
    data.export_csv(out / "dataset.csv")
    (out / "config.cfg").write_text(format_config(config))
    print(f"dataset,{config.env},{config.seed},{len(data)},{out / 'dataset.bin'}")
    return 0


def cmd_train_offline(config, out, args):
    res = pretrain_offline(config, _dataset_for(config, out))
    res.agent.save(out / "checkpoint")
    write_metrics(res.metrics, out / "metrics_offline.jsonl")
    last = res.metrics[-1].as_row() if res.metrics else {}
    (out / "config.cfg").write_text(format_config(config))
    print(f"train-offline,{config.seed},{config.offline_steps},{last.get('loss_flow')}")
    return 0


def cmd_finetune_online(config, out, args):
    agent = FinoAgent.load(_checkpoint(out, prefer_online=False))
    try:
        agent.reconfigure(config.agent)
    except ContractError as exc:
        raise ConfigError(f"{exc} (checkpoint in {out})") from None
    env = make_env(config.env)
    res = finetune_online(config, agent, _dataset_for(config, out), env)
    res.agent.save(out / "checkpoint_online")
    write_metrics(res.metrics, out / "metrics_online.jsonl")
    if res.visits is not None:
        write_visits(res.visits, out / "visits.csv")
    with open(out / "xi_trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "xi_before", "entropy", "xi_after"])
        w.writerows([[s, repr(a), repr(h), repr(b)] for s, a, h, b in res.xi_trace])
    final = [m for m in res.metrics if m.phase == "eval"][-1]
    (out / "config_online.cfg").write_text(format_config(config))
    print(f"finetune-online,{config.seed},{config.online_steps},{final.success},{final.mean_return}")
    return 0


def write_visits(visits, path):
    ys, xs = np.nonzero(visits)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell_x", "cell_y", "count"])
        w.writerows([[int(x), int(y), int(visits[y, x])] for y, x in zip(ys, xs)])


def read_visits(path, shape):
    visits = np.zeros(shape, dtype=np.int64)
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    for x, y, c in rows:
        visits[y, x] = c
    return visits


def cmd_eval(config, out, args):
    agent = FinoAgent.load(_checkpoint(out))
    res = evaluate(agent, make_env(config.env), config.eval_episodes, config.seed + 10_000)
    record = {"seed": config.seed, "episodes": config.eval_episodes, "mean_return": res.mean_return,
              "success_rate": res.success_rate, "returns": res.returns}
    (out / "eval.json").write_text(json.dumps(record, sort_keys=True) + "\n")
    print(f"eval,{config.seed},{res.success_rate},{res.mean_return}")
    return 0


def cmd_verify(config, out, args):
    names = CHECKS if args.check == "all" else (args.check,)
    reports = [run_check(n, eta=args.eta, seed=config.seed, steps=args.steps) for n in names]
    write_reports(reports, out / "verify.jsonl")
    for r in reports:
        print(f"verify,{r.check},{r.statistic:.6g},{r.tolerance:g},{'pass' if r.passed else 'fail'}")
    return 0 if all(r.passed for r in reports) else 1


def cmd_export_plot(config, out, args):
    agent = FinoAgent.load(_checkpoint(out))
    env = make_env(config.env)
    state = env.reset(config.seed)
    grid = GridSpec()
    rows, report = export_log_density(agent.flow, grid, n_samples=10000, state=state, seed=config.seed)
    write_density_csv(rows, out / "density.csv")
    disks = [(cx, cy, FourCircles.radius) for cx, cy in FourCircles.centers] if isinstance(env, FourCircles) else None
    plotting.plot_density(rows, out / "density.png", disks=disks)
    print(f"export-plot,density,{out / 'density.csv'},{report.details['mass']:.6f}")
    if isinstance(env, PointMaze) and (out / "visits.csv").is_file():
        shape = (env.height * config.visit_resolution, env.width * config.visit_resolution)
        plotting.plot_visits(read_visits(out / "visits.csv", shape), env.walls, config.visit_resolution,
                             out / "visits.png")
        print(f"export-plot,visits,{out / 'visits.png'}")
    trace = out / "xi_trace.csv"
    if trace.is_file():
        data = np.loadtxt(trace, delimiter=",", skiprows=1, ndmin=2)
        if len(data):
            plotting.plot_metric(data[:, 0], data[:, 3], out / "xi.png", "temperature xi")
    return 0


HANDLERS = {
    "gen-dataset": cmd_gen_dataset,
    "train-offline": cmd_train_offline,
    "finetune-online": cmd_finetune_online,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "export-plot": cmd_export_plot,
}


# commands that continue from files in --out start from the saved run config
SAVED_CONFIG_COMMANDS = ("train-offline", "finetune-online", "eval", "export-plot")


def _setup_logging():
    level = os.environ.get("FINO_LOG_LEVEL", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"FINO_LOG_LEVEL must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        _setup_logging()
        if args.seeds < 1:
            raise UsageError("--seeds must be >= 1")
        first = resolve_config(args)
        code = 0
        for k in range(args.seeds):
            seed = first.seed + k
            out = Path(args.out) / f"seed_{seed}" if args.seeds > 1 else Path(args.out)
            config = first
            saved = out / "config.cfg"
            if args.command in SAVED_CONFIG_COMMANDS and saved.is_file():
                # the run definition saved next to the checkpoint replaces the built-in defaults
                config = resolve_config(args, load_config(saved))
            if args.seeds > 1:
                config = config.replace(seed=seed)
            out.mkdir(parents=True, exist_ok=True)
            code = max(code, HANDLERS[args.command](config, out, args))
        return code
    except (UsageError, ConfigError) as exc:
        print(f"fino: error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"fino: training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
