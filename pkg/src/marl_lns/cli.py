"""Command-line entry point: ``marl-lns {train,bench,verify-bcd,plot}``."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bcd_verify as bcd
from .harness.bench import benchmark_time
from .harness.config import load_config
from .harness.report import emit_csv, parse_csv, plot_run
from .harness.training import train


def _run_config(args, algo: str | None = None):
    return load_config(
        args.config,
        env_id=args.env, scheduler=algo or args.algo, n_agents=args.n_agents, m=args.m,
        n_lns_iterations=args.nt, total_env_steps=args.total_steps, seed=args.seed,
        num_envs=args.num_envs, buffer_length=args.buffer_length,
        output=getattr(args, "out", None),
    )


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (default: $MARL_LNS_CONFIG or shipped defaults)")
    p.add_argument("--env", help="team_spread | climb_game | gaussian_squeeze")
    p.add_argument("--algo", help="full | rlns | blns | alns")
    p.add_argument("--n-agents", type=int)
    p.add_argument("--m", type=int, help="neighborhood size")
    p.add_argument("--nt", type=int, help="number of LNS iterations")
    p.add_argument("--total-steps", type=int)
    p.add_argument("--num-envs", type=int)
    p.add_argument("--buffer-length", type=int)
    p.add_argument("--seed", type=int)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    metrics = train(cfg)
    if args.out:
        emit_csv(metrics, args.out)
    print(f"final_metric={metrics.final_metric:.6g} env_steps={metrics.env_steps} "
          f"updates={metrics.n_updates} wall_s={metrics.wall_time_s:.3g}")
    return 0


def cmd_bench(args) -> int:
    base = _run_config(args, algo=args.baseline_algo).with_(m=None, output=None)
    cand = _run_config(args).with_(output=None)
    report, _, _ = benchmark_time(base, cand)
    text = json.dumps(report.as_dict(), indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    if not report.reliable:
        print("warning: load probes varied by more than 20%; timings unreliable", file=sys.stderr)
    return 0


def cmd_verify_bcd(args) -> int:
    if args.family == "quadratic":
        rng = np.random.default_rng(args.seed)
        blocks = bcd.contiguous_blocks(args.dim, args.blocks)
        Q = bcd.block_coupled_spd(args.dim, args.condition, blocks, 0.5, rng)
        obj = bcd.quadratic(Q, rng.standard_normal(args.dim), name="spd")
    else:
        obj = bcd.cosine_objective(args.dim)
        blocks = bcd.contiguous_blocks(args.dim, args.blocks)
    if args.rule == "exact":
        rule = bcd.ExactBlockMin()
    else:
        rule = bcd.BoundedGradientStep(bcd.per_visit(bcd.harmonic, args.blocks))
    iters = args.iterations or (200 if args.rule == "exact" else 2000) * args.blocks
    x0 = np.full(args.dim, 0.5) if args.family == "cosine" else None
    trace = bcd.bcd_run(obj, blocks, rule, iters, x0=x0, keep_iterates=False)
    res = bcd.check_rate_bound(trace)
    if args.out:
        bcd.write_trace_csv(trace, args.out)
    print(f"final_gap={trace.gaps[-1]:.3e} c={res.c:.6g} rate_bound={'pass' if res.passed else 'fail'}")
    return 0


def cmd_plot(args) -> int:
    plot_run(parse_csv(args.inp), args.out, title=args.title)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marl-lns")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training configuration")
    _add_run_args(p)
    p.add_argument("--out", help="per-LNS-iteration metrics CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="time a scheduler against a baseline")
    _add_run_args(p)
    p.add_argument("--baseline-algo", default="full")
    p.add_argument("--out", help="JSON report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify-bcd", help="block coordinate descent convergence check")
    p.add_argument("--family", choices=("quadratic", "cosine"), default="quadratic")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--condition", type=float, default=100.0)
    p.add_argument("--rule", choices=("exact", "harmonic"), default="exact")
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="per-iteration trace CSV")
    p.set_defaults(func=cmd_verify_bcd)

    p = sub.add_parser("plot", help="learning curve and time breakdown figure")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
