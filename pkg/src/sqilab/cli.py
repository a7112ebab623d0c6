"""Command-line entry point: ``sqilab <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import approx
from .envs import ACTIONS, load_scenario, make_gridnav
from .errors import (ConfigurationError, ContractError, NumericalError, TrainingError,
                     UsageError, VerificationError)
from .harness import (COLUMNS, ExperimentSpec, build_report, evaluate,
                      generate_demonstrations, make_evaluator, run_experiment,
                      solve_expert, verify_gradient_identity)
from .replay import read_demos, write_demos
from .softq import SoftQFunction, export_q_csv, load_q_csv
from .trainers import ABLATIONS, ALGORITHMS, desk_config, train

log = logging.getLogger("sqilab")


def _train_config(path: str | None, **overrides):
    data = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        data = yaml.safe_load(p.read_text()) or {}
        data = data.get("train", data)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return desk_config(**data)


def _save_q(q: SoftQFunction, out: Path) -> Path:
    if q.kind == "tabular":
        path = out / "q.csv"
        export_q_csv(q.table, path, ACTIONS)
    else:
        path = out / "network.json"
        approx.save_checkpoint(q.net, path)
    return path


def _load_q(path: str) -> SoftQFunction:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    if p.suffix == ".csv":
        table = load_q_csv(p)
        return SoftQFunction.tabular(*table.shape, table=table)
    return SoftQFunction.approx(approx.load_checkpoint(p))


def cmd_gen_demos(args) -> int:
    env = make_gridnav(load_scenario(args.scenario))
    demos = generate_demonstrations(env, args.gamma, args.n, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_demos(demos.rollouts, out)
    expert_csv = out.with_suffix(".expert.csv")
    export_q_csv(demos.expert.table, expert_csv, ACTIONS)
    info = {"demonstrations": str(out), "expert_q": str(expert_csv),
            "rollouts": len(demos.rollouts),
            "transitions": sum(len(r) for r in demos.rollouts),
            "expert": demos.metrics.as_dict()}
    out.with_suffix(".expert.json").write_text(json.dumps(info, indent=2) + "\n")
    print(json.dumps(info, indent=2))
    return 0


def cmd_train(args) -> int:
    scen = load_scenario(args.scenario)
    env = make_gridnav(scen)
    cfg = _train_config(args.config, algorithm=args.algorithm, seed=args.seed,
                        max_gradient_steps=args.steps)
    if args.demos:
        rollouts = read_demos(args.demos)
    else:
        rollouts = generate_demonstrations(env, args.expert_gamma, args.n_demos,
                                           np.random.default_rng([cfg.seed, 1])).rollouts
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = train(env, rollouts, cfg, np.random.default_rng([cfg.seed, 2]),
                   make_evaluator(env, args.eval_episodes, cfg.seed))
    report.write_curve(out / "curve.csv")
    report.write_summary(out / "summary.json")
    ckpt = _save_q(report.q, out)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    summary = report.summary()
    summary["checkpoint"] = str(ckpt)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    scen = load_scenario(args.scenario)
    env = make_gridnav(scen)
    q = solve_expert(env, args.expert_gamma) if args.expert else _load_q(args.checkpoint)
    keys = [k for k, _ in COLUMNS] if args.init == "both" else [f"{args.init}_init"]
    result = {}
    for i, key in enumerate(keys):
        m = evaluate(q, env, getattr(scen, key), args.episodes,
                     np.random.default_rng([args.seed, i]))
        result[key] = m.as_dict()
    print(json.dumps(result, indent=2))
    return 0


def _grid(args, algorithms) -> int:
    spec = ExperimentSpec(
        scenario=args.scenario, algorithms=list(algorithms), seeds=list(args.seeds),
        output_dir=args.out, demo_count=args.demo_count,
        eval_episodes=args.eval_episodes, expert_gamma=args.expert_gamma,
        train=_train_config(args.config, max_gradient_steps=args.steps),
    )
    out = run_experiment(spec)
    print((out / "summary.txt").read_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    return _grid(args, ["sqil", *ABLATIONS] if not args.with_bc else
                 ["sqil", "bc", *ABLATIONS])


def cmd_run(args) -> int:
    spec = ExperimentSpec.load(args.experiment)
    if args.out:
        spec.output_dir = args.out
    out = run_experiment(spec)
    print((out / "summary.txt").read_text(), end="")
    return 0


def cmd_verify_identity(args) -> int:
    failures = 0
    for seed in range(args.start, args.start + args.seeds):
        r = verify_gradient_identity(seed)
        failures += not r["passed"]
        status = "PASS" if r["passed"] else "FAIL"
        print(f"{status} seed={seed} params={r['n_params']} "
              f"analytic={r['analytic_max_rel']:.2e} "
              f"fd={max(r['fd_lhs_max_rel'], r['fd_rhs_max_rel']):.2e}")
    print(f"{args.seeds - failures}/{args.seeds} passed")
    return 1 if failures else 0


def cmd_report(args) -> int:
    build_report(args.out)
    print((Path(args.out) / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sqilab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_arg(sp, default=None):
        sp.add_argument("--scenario", default=default, required=default is None,
                        help="scenario YAML file or preset name (shifted-start, matched-start)")

    def grid_args(sp, default_out):
        sp.add_argument("--config", help="training config YAML (overrides the desk profile)")
        sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
        sp.add_argument("--out", default=default_out, help="output directory")
        sp.add_argument("--demo-count", type=int, default=100)
        sp.add_argument("--eval-episodes", type=int, default=100)
        sp.add_argument("--expert-gamma", type=float, default=0.95)
        sp.add_argument("--steps", type=int, help="override max_gradient_steps")

    sp = sub.add_parser("gen-demos", help="solve the expert and write demonstrations")
    scenario_arg(sp)
    sp.add_argument("--n", type=int, default=100, help="number of rollouts")
    sp.add_argument("--gamma", type=float, default=0.95, help="expert discount")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default="demos.tsv", help="demonstration file to write")
    sp.set_defaults(func=cmd_gen_demos)

    sp = sub.add_parser("train", help="train one imitation agent")
    scenario_arg(sp)
    sp.add_argument("--config", help="training config YAML (overrides the desk profile)")
    sp.add_argument("--algorithm", choices=ALGORITHMS)
    sp.add_argument("--demos", help="demonstration file; generated when omitted")
    sp.add_argument("--n-demos", type=int, default=100)
    sp.add_argument("--expert-gamma", type=float, default=0.95)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int, help="override max_gradient_steps")
    sp.add_argument("--eval-episodes", type=int, default=100)
    sp.add_argument("--out", default="run", help="output directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint with the greedy policy")
    scenario_arg(sp)
    group = sp.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint", help="network.json or q.csv")
    group.add_argument("--expert", action="store_true", help="evaluate the exact expert")
    sp.add_argument("--expert-gamma", type=float, default=0.95)
    sp.add_argument("--init", choices=("demo", "train", "both"), default="both")
    sp.add_argument("--episodes", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="SQIL and its four ablations over seeds")
    scenario_arg(sp, default="shifted-start")
    grid_args(sp, "results/ablate")
    sp.add_argument("--with-bc", action="store_true", help="also train BC")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("run", help="run an experiment spec file")
    sp.add_argument("--experiment", required=True, help="experiment YAML")
    sp.add_argument("--out", help="override output_dir")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("verify-identity", help="check the regularized-BC gradient identity")
    sp.add_argument("--seeds", type=int, default=20, help="number of random instances")
    sp.add_argument("--start", type=int, default=0, help="first seed")
    sp.set_defaults(func=cmd_verify_identity)

    sp = sub.add_parser("report", help="rebuild summary tables from a results directory")
    sp.add_argument("--out", required=True, help="results directory")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, ContractError, UsageError, NumericalError,
            TrainingError, VerificationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
