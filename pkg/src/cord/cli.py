"""Command-line entry points: train, eval-teams, eval-agents, diagnose, plot."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import METHODS, load_config, run_root
from . import diagnostics
from .runner import eval_unseen_agents, eval_unseen_teams, run_training


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--seed", type=int)
    p.add_argument("--total-steps", type=int, dest="total_steps")
    p.add_argument("--train-team-sizes", dest="train_team_sizes")
    p.add_argument("--lambda-c", type=float, dest="lambda_c")
    p.add_argument("--lambda-d", type=float, dest="lambda_d")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--t-role", type=int, dest="t_role")
    p.add_argument("--gamma", type=float)
    p.add_argument("--buffer-capacity", type=int, dest="buffer_capacity")
    p.add_argument("--batch-size-steps", type=int, dest="batch_size_steps")
    p.add_argument("--updates-per-episode", type=int, dest="updates_per_episode")
    p.add_argument("--target-period", type=int, dest="target_period")
    p.add_argument("--lr", type=float)
    p.add_argument("--d-role", type=int, dest="d_role")
    p.add_argument("--eval-episodes", type=int, dest="eval_episodes")
    p.add_argument(
        "--role-grad", dest="role_grad", choices=["on", "off"],
        help="backpropagate TD gradients into the controller through sampled roles",
    )
    p.add_argument(
        "--replay-log", dest="replay_log", action="store_const", const=True,
        default=None, help="write a step-level episode-replay JSONL log",
    )


def _config_from_args(args) -> "ExperimentConfig":
    from dataclasses import fields

    from .config import ExperimentConfig

    names = {f.name for f in fields(ExperimentConfig)}
    overrides = {
        k: v for k, v in vars(args).items() if k in names and v is not None
    }
    if overrides.get("role_grad") is not None:
        overrides["role_grad"] = overrides["role_grad"] == "on"
    return load_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    run_dir = args.run_dir or run_root() / f"{cfg.method}_seed{cfg.seed}"
    run_training(cfg, run_dir, resume=args.resume, quiet=args.quiet)
    print(f"run complete: {run_dir}")
    return 0


def cmd_eval_teams(args) -> int:
    sizes = tuple(int(s) for s in args.team_sizes.split(","))
    results = eval_unseen_teams(
        args.checkpoint, team_sizes=sizes, episodes=args.episodes
    )
    payload = {
        "method": _checkpoint_method(args.checkpoint),
        "results": {
            f"{size}-agent": {
                "mean": res["mean"],
                "std": res["std"],
                "episodes": res["episodes"],
            }
            for size, res in results.items()
        },
    }
    _emit_eval(payload, args)
    return 0


def cmd_eval_agents(args) -> int:
    counts = None
    if args.controlled_counts:
        counts = tuple(int(s) for s in args.controlled_counts.split(","))
    out = {}
    for size in (int(s) for s in args.team_sizes.split(",")):
        res = eval_unseen_agents(
            args.checkpoint,
            team_size=size,
            controlled_counts=counts,
            episodes=args.episodes,
        )
        out[f"{size}-agent"] = {
            "mean": res["mean"],
            "std": res["std"],
            "episodes": res["total_episodes"],
            "per_count": res["per_count"],
        }
    payload = {"method": _checkpoint_method(args.checkpoint), "results": out}
    _emit_eval(payload, args)
    return 0


def _checkpoint_method(checkpoint: str) -> str:
    from .runner import load_checkpoint

    return load_checkpoint(checkpoint)["config"]["method"]


def _emit_eval(payload: dict, args) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")


def cmd_diagnose(args) -> int:
    reports = diagnostics.run_all(seed=args.seed)
    for report in reports:
        print(report.summary())
    if args.out:
        diagnostics.write_report(reports, args.out)
    failed = [r for r in reports if not r.skipped and not r.passed]
    return 1 if failed else 0


def cmd_plot(args) -> int:
    from .plotting import emit_plots

    written = emit_plots(args.runs, args.out_dir)
    for path in written:
        print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="cord",
        description="Role-diversity MARL: training, generalization tests, "
        "theory diagnostics, and plots.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one (method, seed) run")
    _add_config_flags(p)
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval-teams", help="generalization to unseen team sizes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--team-sizes", default="5,6", dest="team_sizes")
    p.add_argument("--episodes", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval_teams)

    p = sub.add_parser(
        "eval-agents", help="generalization to built-in (unseen) teammates"
    )
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--team-sizes", default="5,6", dest="team_sizes")
    p.add_argument(
        "--controlled-counts",
        dest="controlled_counts",
        help="comma list; default 1..team_size-1",
    )
    p.add_argument("--episodes", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval_agents)

    p = sub.add_parser("diagnose", help="numerical theory checks and audits")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("plot", help="learning curves and generalization bars")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out-dir", dest="out_dir", default="plots")
    p.set_defaults(fn=cmd_plot)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
