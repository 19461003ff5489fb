"""Command-line interface.

Subcommands: ``run`` (seeded experiments from a config file), ``fixed-point``
(the generalized value-iteration oracle on a serialized MDP), ``check``
(property suites: non-expansion, nglie, resilience, interruptibility),
``crossover`` (the exploration level where the cautious action takes over in
the trap environment), and ``report`` (the safety checklist for a finished
run directory). Exit codes: 0 all requested checks pass, 1 a check failed,
2 usage or config errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .environments import ThreeStateParams, env_from_config, epsilon_crossover
from .exploration import strategy_from_config, validate_nglie
from .harness import (
    ConfigError,
    assemble_virtuous_report,
    load_config_file,
    parse_experiment_config,
    resolve_scheme,
    run_experiment,
)
from .interruption import test_dynamic_safe_interruptibility
from .mdp import load_json
from .operators import BackupOperatorSpec, check_non_expansion, solve_fixed_point, write_solver_trace
from .qtable import QTable
from .safety import resilience_sweep


def _add_operator_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--operator", required=True,
                        choices=("max", "rank_average", "boltzmann", "mellowmax",
                                 "rrr_mellowmax", "rank_select"))
    parser.add_argument("--weights", help="comma-separated rank weights")
    parser.add_argument("--beta", type=float)
    parser.add_argument("--omega", type=float)
    parser.add_argument("--t1", type=float, help="top-rank weight for rrr_mellowmax")
    parser.add_argument("--rank", type=int, help="rank for rank_select")


def _spec_from_flags(args) -> BackupOperatorSpec:
    weights = None
    if args.weights:
        weights = tuple(float(x) for x in args.weights.split(","))
    return BackupOperatorSpec(
        kind=args.operator,
        rank_weights=weights,
        beta=args.beta,
        omega=args.omega,
        top_weight=args.t1,
        select_rank=args.rank,
    )


def _cmd_run(args) -> int:
    config = parse_experiment_config(load_config_file(args.config))
    if args.seed is not None:
        config = parse_experiment_config({**config.doc, "seeds": [args.seed]})
    out = run_experiment(config, parallelism=args.jobs, out_dir=args.out)
    print(f"run directory: {out.run_dir}")
    print(f"aggregate: {out.aggregate_path}")
    return 0


def _cmd_fixed_point(args) -> int:
    mdp, _channel = load_json(args.mdp)
    spec = _spec_from_flags(args)
    result = solve_fixed_point(mdp, spec, tolerance=args.tolerance, max_iters=args.max_iters)
    values = result.q.values
    for s in range(values.shape[0]):
        # display precision sits above the solver's certified error bound
        row = ", ".join(f"{v:.8g}" for v in values[s])
        print(f"Q*({s}, .) = ({row})")
    print(f"converged in {result.iterations} sweeps, residual {result.residual:.3g}, "
          f"error bound {result.error_bound:.3g}")
    if result.rank_ties:
        print(f"note: near-tied ranks at states {list(result.rank_ties)}")
    if args.out:
        result.q.to_csv(args.out)
        print(f"wrote {args.out}")
    if args.trace:
        write_solver_trace(args.trace, result)
        print(f"wrote {args.trace}")
    return 0


def _cmd_check_non_expansion(args) -> int:
    spec = _spec_from_flags(args)
    verdict = check_non_expansion(
        spec, args.actions, num_random_trials=args.trials,
        search_budget=args.search, rng=np.random.default_rng(args.seed),
    )
    print(str(verdict))
    return 0 if verdict.holds else 1


def _cmd_check_nglie(args) -> int:
    doc = load_config_file(args.strategy)
    strategy = strategy_from_config(doc.get("strategy", doc), args.actions)
    report = validate_nglie(strategy, args.horizon, args.psi_inf, tol=args.tol)
    for line in report.lines():
        print(line)
    return 0 if report.passed else 1


def _cmd_check_resilience(args) -> int:
    grid = [float(x) for x in args.grid.split(",")]
    sweep = resilience_sweep(args.family, args.mu, grid, args.actions)
    for param, sigma in sweep.curve:
        print(f"param {param:g}: sigma {sigma:.6g}")
    print(f"sigma_max {sweep.sigma_max:.6g}")
    print(f"{'strong' if sweep.strong else 'NOT strong'}: {sweep.reason}")
    return 0 if sweep.strong else 1


def _cmd_check_interruptibility(args) -> int:
    config = parse_experiment_config(load_config_file(args.config))
    env = env_from_config(config.env_doc)
    strategy = strategy_from_config(config.strategy_doc, env.mdp.num_actions)
    scheme = resolve_scheme(config, env)
    if scheme is None:
        print("config attaches no interruption scheme", file=sys.stderr)
        return 2
    result = test_dynamic_safe_interruptibility(
        config.algorithm, env.mdp, env.channel, strategy, scheme,
        trials=args.trials, seed=args.seed if args.seed is not None else config.seeds[0],
        num_contexts=args.contexts, train_steps=args.train_steps,
        lr=config.learning_rate,
    )
    print(json.dumps(result.to_json_dict(), indent=2))
    return 0 if result.passed else 1


def _cmd_crossover(args) -> int:
    doc = load_config_file(args.config)
    overrides = doc.get("overrides", {})
    if overrides.get("infection_time") == "never":
        overrides = dict(overrides, infection_time=None)
    params = ThreeStateParams(**overrides)
    value = epsilon_crossover(params, resolution=args.resolution)
    if value is None:
        print("none")
    else:
        print(f"{value:.6g}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    meta = json.loads((run_dir / "run_meta.json").read_text())
    config = parse_experiment_config(meta["config"])
    reward_threshold = args.reward_threshold
    if reward_threshold is None:
        reward_threshold = config.doc.get("reward_threshold")
    if reward_threshold is None:
        print("no reward threshold in the config; pass --reward-threshold", file=sys.stderr)
        return 2
    trained = None
    qtable_path = run_dir / f"seed_{config.seeds[0]}" / "qtable.csv"
    if qtable_path.exists():
        trained = QTable.from_csv(qtable_path)
    report = assemble_virtuous_report(
        config,
        reward_threshold=float(reward_threshold),
        dsi_trials=args.trials,
        dsi_contexts=args.contexts,
        dsi_train_steps=args.train_steps,
        trained_q=trained,
    )
    print(report.to_text())
    return 0 if report.overall else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vsrl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"vsrl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a seeded experiment from a config file")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, help="override the config's seed list")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("fixed-point", help="solve the generalized Bellman fixed point")
    p.add_argument("mdp", help="serialized MDP (JSON)")
    _add_operator_flags(p)
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.add_argument("--max-iters", type=int, default=100_000)
    p.add_argument("--out", help="write the solved table as CSV")
    p.add_argument("--trace", help="write the residual trace as JSON lines")
    p.set_defaults(func=_cmd_fixed_point)

    check = sub.add_parser("check", help="property suites").add_subparsers(
        dest="check_kind", required=True
    )

    p = check.add_parser("non-expansion")
    _add_operator_flags(p)
    p.add_argument("--actions", type=int, default=2)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--search", type=int, default=2_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_check_non_expansion)

    p = check.add_parser("nglie")
    p.add_argument("strategy", help="config file with a strategy mapping")
    p.add_argument("--actions", type=int, required=True)
    p.add_argument("--horizon", type=int, default=100_000)
    p.add_argument("--psi-inf", type=float, required=True)
    p.add_argument("--tol", type=float, default=0.01)
    p.set_defaults(func=_cmd_check_nglie)

    p = check.add_parser("resilience")
    p.add_argument("--family", required=True,
                   choices=("rrr", "rrr_mellowmax", "eps_greedy", "mellowmax"))
    p.add_argument("--mu", type=float, required=True)
    p.add_argument("--actions", type=int, required=True)
    p.add_argument("--grid", default="0.01,1,10,100")
    p.set_defaults(func=_cmd_check_resilience)

    p = check.add_parser("interruptibility")
    p.add_argument("config")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--contexts", type=int, default=20)
    p.add_argument("--train-steps", type=int, default=30_000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_check_interruptibility)

    p = sub.add_parser("crossover", help="exploration level where the cautious action wins")
    p.add_argument("config", help="environment config (three_state)")
    p.add_argument("--resolution", type=float, default=1e-3)
    p.set_defaults(func=_cmd_crossover)

    p = sub.add_parser("report", help="safety checklist for a finished run directory")
    p.add_argument("run_dir")
    p.add_argument("--reward-threshold", type=float)
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--contexts", type=int, default=20)
    p.add_argument("--train-steps", type=int, default=30_000)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
