"""Expert demonstrations, evaluation, experiment grids and identity checks."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import approx
from .envs import (GridNav, InitDist, Rollout, State, Transition, config_to_dict,
                   load_scenario, make_gridnav, rollout, step, uniform_policy)
from .errors import ConfigurationError, VerificationError
from .replay import write_demos
from .softq import (SoftQFunction, TransitionBatch, boltzmann_policy,
                    soft_value_iteration)
from .trainers import (ABLATIONS, ALGORITHMS, LossTerm, TrainConfig, desk_config,
                       make_ablation_config, objective, train)

log = logging.getLogger(__name__)

COLUMNS = (("train_init", "Domain Shift"), ("demo_init", "No Shift"))


@dataclass
class Metrics:
    success_rate: float
    avg_return: float
    episodes: int

    def as_dict(self) -> dict:
        return {"success_rate": self.success_rate, "avg_return": self.avg_return,
                "episodes": self.episodes}


def metrics_from_rollouts(rollouts: Sequence[Rollout]) -> Metrics:
    n = len(rollouts)
    wins = sum(ro.terminated_by == "goal" for ro in rollouts)
    return Metrics(wins / n, math.fsum(ro.true_return for ro in rollouts) / n, n)


def _stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# -- experts and evaluation ------------------------------------------------------

@dataclass
class Demonstrations:
    rollouts: list[Rollout]
    expert: SoftQFunction
    metrics: Metrics


def solve_expert(env: GridNav, gamma: float) -> SoftQFunction:
    return soft_value_iteration(env, gamma)


def generate_demonstrations(env: GridNav, gamma: float, n: int,
                            rng: np.random.Generator,
                            expert: SoftQFunction | None = None) -> Demonstrations:
    """Roll out the stochastic soft-optimal expert ``n`` times from ``demo_init``."""
    if n < 1:
        raise ConfigurationError("need at least one demonstration")
    if expert is None:
        expert = solve_expert(env, gamma)
    table = expert.table

    def policy(cell, obs):
        return boltzmann_policy(table[cell])

    rollouts = [rollout(env, policy, env.config.demo_init, rng) for _ in range(n)]
    return Demonstrations(rollouts, expert, metrics_from_rollouts(rollouts))


def greedy_actions(q: SoftQFunction, env: GridNav) -> np.ndarray:
    """Argmax action per cell, ties to the lowest index."""
    return np.argmax(q.all_values(env.features), axis=1)


def evaluate_policy(env: GridNav, policy, init: InitDist, episodes: int,
                    rng: np.random.Generator) -> Metrics:
    if episodes < 1:
        raise ConfigurationError("episodes must be >= 1")
    return metrics_from_rollouts([rollout(env, policy, init, rng) for _ in range(episodes)])


def evaluate(q: SoftQFunction, env: GridNav, init: InitDist, episodes: int,
             rng: np.random.Generator) -> Metrics:
    """Success rate and return of the deterministic argmax policy."""
    if episodes < 1:
        raise ConfigurationError("episodes must be >= 1")
    greedy = greedy_actions(q, env)
    goals = env.config.goal_cells
    wins = 0
    total = 0.0
    for _ in range(episodes):
        s = State(init.sample(rng), 0)
        while True:
            s, done = step(env, s, int(greedy[s.cell]), rng)
            total += env.cell_reward(s.cell)
            if done:
                break
        wins += s.cell in goals
    return Metrics(wins / episodes, total / episodes, episodes)


# -- experiments -----------------------------------------------------------------

@dataclass
class ExperimentSpec:
    scenario: str
    algorithms: list[str]
    seeds: list[int]
    output_dir: str
    demo_count: int = 100
    eval_episodes: int = 100
    expert_gamma: float = 0.95
    train: TrainConfig = field(default_factory=desk_config)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("experiment needs at least one seed")
        if self.demo_count < 1 or self.eval_episodes < 1:
            raise ConfigurationError("demo_count and eval_episodes must be >= 1")
        for a in self.algorithms:
            if a not in ALGORITHMS and a not in ABLATIONS:
                raise ConfigurationError(f"unknown algorithm or ablation {a!r}")
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {"scenario", "algorithms", "seeds", "output_dir", "demo_count",
                 "eval_episodes", "expert_gamma", "train"}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown experiment keys {sorted(unknown)}")
        missing = {"scenario", "algorithms", "seeds"} - set(data)
        if missing:
            raise ConfigurationError(f"experiment is missing keys {sorted(missing)}")
        data = dict(data)
        data.setdefault("output_dir", "results")
        data["train"] = desk_config(**(data.get("train") or {}))
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentSpec":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"experiment file not found: {path}")
        return cls.from_dict(yaml.safe_load(path.read_text()) or {})

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "algorithms": list(self.algorithms),
                "seeds": list(self.seeds), "output_dir": self.output_dir,
                "demo_count": self.demo_count, "eval_episodes": self.eval_episodes,
                "expert_gamma": self.expert_gamma, "train": self.train.to_dict()}


def config_for(name: str, base: TrainConfig, seed: int) -> TrainConfig:
    """Training config for an algorithm name or SQIL ablation variant."""
    base = replace(base, seed=seed)
    if name in ABLATIONS:
        return make_ablation_config(replace(base, algorithm="sqil"), name)
    return replace(base, algorithm=name)


def make_evaluator(env: GridNav, episodes: int, seed: int):
    def evaluator(q: SoftQFunction, k: int) -> dict:
        out = {}
        for i, (key, _) in enumerate(COLUMNS):
            init = getattr(env.config, key)
            m = evaluate(q, env, init, episodes, _stream(seed, 3, k, i))
            out[f"success_{key}"] = m.success_rate
            out[f"return_{key}"] = m.avg_return
        return out
    return evaluator


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(spec: ExperimentSpec) -> Path:
    """Train every algorithm for every seed and write the report files.

    Layout under ``spec.output_dir``: ``demos/seed<k>.tsv``,
    ``runs/<algorithm>_seed<k>/{curve.csv,summary.json}``, ``baselines.csv``,
    ``summary.csv``, ``summary.txt``, ``config.yaml`` and ``manifest.json``.
    A run that raises is recorded in its directory and the grid continues.
    """
    out = Path(spec.output_dir)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "demos").mkdir(exist_ok=True)
    scen = load_scenario(spec.scenario)
    env = make_gridnav(scen)
    snapshot = {"experiment": spec.to_dict(), "scenario_config": config_to_dict(scen)}
    (out / "config.yaml").write_text(yaml.safe_dump(snapshot, sort_keys=False))

    expert = solve_expert(env, spec.expert_gamma)
    baseline_rows = []
    for seed in spec.seeds:
        demos = generate_demonstrations(env, spec.expert_gamma, spec.demo_count,
                                        _stream(seed, 1), expert=expert)
        write_demos(demos.rollouts, out / "demos" / f"seed{seed}.tsv")
        for i, (key, _) in enumerate(COLUMNS):
            init = getattr(scen, key)
            em = evaluate(expert, env, init, spec.eval_episodes, _stream(seed, 4, i))
            rm = evaluate_policy(env, uniform_policy, init, spec.eval_episodes,
                                 _stream(seed, 5, i))
            baseline_rows.append(["expert", seed, key, repr(em.success_rate),
                                  repr(em.avg_return)])
            baseline_rows.append(["random", seed, key, repr(rm.success_rate),
                                  repr(rm.avg_return)])
        for name in spec.algorithms:
            cfg = config_for(name, spec.train, seed)
            run_dir = out / "runs" / f"{name}_seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            log.info("training %s seed %d", name, seed)
            try:
                report = train(env, demos.rollouts, cfg, _stream(seed, 2),
                               make_evaluator(env, spec.eval_episodes, seed))
            except Exception as exc:  # recorded per cell; the grid continues
                (run_dir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
                log.warning("run %s seed %d failed: %s", name, seed, exc)
                continue
            report.write_curve(run_dir / "curve.csv")
            report.write_summary(run_dir / "summary.json")
    _write_csv(out / "baselines.csv",
               ["policy", "seed", "init", "success_rate", "avg_return"], baseline_rows)

    digest = hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode()).hexdigest()
    manifest = {"config_sha256": digest, "seeds": list(spec.seeds),
                "algorithms": list(spec.algorithms), "scenario": scen.name}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    build_report(out, spec.algorithms, spec.seeds)
    return out


def read_best_from_curve(path: Path) -> dict[str, float]:
    """Maximum over evaluation checkpoints of every ``success_*`` column."""
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    best = {}
    for key in (rows[0].keys() if rows else ()):
        if key.startswith("success_"):
            vals = [float(r[key]) for r in rows if r[key] != ""]
            if vals:
                best[key] = max(vals)
    return best


def mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return float("nan"), float("nan")
    if arr.size == 1:
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(arr.size))


def collect_results(out: Path, algorithms: Sequence[str], seeds: Sequence[int]
                    ) -> dict[str, dict[str, list[float]]]:
    """``{row: {init_key: [per-seed best success]}}`` recomputed from disk."""
    table: dict[str, dict[str, list[float]]] = {}
    for name in algorithms:
        row = table.setdefault(name, {k: [] for k, _ in COLUMNS})
        for seed in seeds:
            curve = out / "runs" / f"{name}_seed{seed}" / "curve.csv"
            if not curve.is_file():
                continue
            best = read_best_from_curve(curve)
            for key, _ in COLUMNS:
                if f"success_{key}" in best:
                    row[key].append(best[f"success_{key}"])
    base = out / "baselines.csv"
    if base.is_file():
        with base.open(newline="") as fh:
            for r in csv.DictReader(fh):
                row = table.setdefault(r["policy"], {k: [] for k, _ in COLUMNS})
                row[r["init"]].append(float(r["success_rate"]))
    return table


def build_report(out: str | Path, algorithms: Sequence[str] | None = None,
                 seeds: Sequence[int] | None = None) -> dict:
    """Write ``summary.csv`` and ``summary.txt``; return the mean/stderr table."""
    out = Path(out)
    if algorithms is None or seeds is None:
        manifest = out / "manifest.json"
        if not manifest.is_file():
            raise FileNotFoundError(f"no manifest.json in {out}")
        m = json.loads(manifest.read_text())
        algorithms, seeds = m["algorithms"], m["seeds"]
    results = collect_results(out, algorithms, seeds)
    order = ["random", *algorithms, "expert"]
    rows, summary = [], {}
    for name in order:
        if name not in results:
            continue
        summary[name] = {}
        for key, _ in COLUMNS:
            mu, se = mean_stderr(results[name][key])
            summary[name][key] = (mu, se, len(results[name][key]))
            rows.append([name, key, repr(mu), repr(se), len(results[name][key])])
    _write_csv(out / "summary.csv", ["row", "init", "mean", "stderr", "n"], rows)

    lines = [f"{'':<12}{COLUMNS[0][1]:>20}{COLUMNS[1][1]:>20}"]
    for name, cols in summary.items():
        cells = [f"{cols[k][0]:.2f} +/- {cols[k][1]:.2f}" for k, _ in COLUMNS]
        lines.append(f"{name:<12}{cells[0]:>20}{cells[1]:>20}")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    return summary


# -- gradient identity -------------------------------------------------------------

@dataclass(frozen=True)
class IdentitySizes:
    obs_dim: int = 3
    hidden: int = 2
    actions: int = 2
    rollouts: int = 3
    max_len: int = 5
    samp: int = 4


def _rand_transitions(rng, sizes, s0):
    demo, starts = [], []
    sid = 0
    for _ in range(sizes.rollouts):
        length = int(rng.integers(1, sizes.max_len + 1))
        obs = [s0] + [rng.normal(size=sizes.obs_dim) for _ in range(length)]
        for t in range(length):
            a = int(rng.integers(sizes.actions))
            demo.append(Transition(obs[t], a, obs[t + 1], t == length - 1, sid, sid + 1))
            sid += 1
        starts.append(s0)
    samp = [Transition(rng.normal(size=sizes.obs_dim), int(rng.integers(sizes.actions)),
                       rng.normal(size=sizes.obs_dim), bool(rng.random() < 0.3), 0, 0)
            for _ in range(sizes.samp)]
    return demo, samp


def identity_sides(q: SoftQFunction, demo, samp, s0, n_rollouts: int,
                   lambda_demo: float, lambda_samp: float):
    """Terms for both sides with gamma = 1 and summed squared errors.

    Left: BC + lambda_demo * delta2(demo, 0) + lambda_samp * delta2(samp, 0).
    Right: N * V(s0) + lambda_demo * delta2(demo, 1/(2 lambda_demo))
    + lambda_samp * delta2(samp, 0).
    """
    demo_b = TransitionBatch.from_transitions(demo)
    samp_b = TransitionBatch.from_transitions(samp) if samp else None
    start_b = TransitionBatch.from_transitions([Transition(s0, 0, s0, True, 0, 0)])
    lhs = [LossTerm("bc", demo_b, 1.0, reduction="sum"),
           LossTerm("bellman", demo_b, lambda_demo, 0.0, 1.0, "sum")]
    rhs = [LossTerm("value", start_b, float(n_rollouts), reduction="sum"),
           LossTerm("bellman", demo_b, lambda_demo, 1.0 / (2.0 * lambda_demo), 1.0, "sum")]
    if samp_b is not None:
        lhs.append(LossTerm("bellman", samp_b, lambda_samp, 0.0, 1.0, "sum"))
        rhs.append(LossTerm("bellman", samp_b, lambda_samp, 0.0, 1.0, "sum"))
    return lhs, rhs


def verify_gradient_identity(seed: int, sizes: IdentitySizes | None = None,
                             lambda_demo: float = 0.5, lambda_samp: float | None = None,
                             tol: float = 1e-6, fd_tol: float = 1e-4,
                             epsilon: float = 1e-5, raise_on_failure: bool = False) -> dict:
    """Check the telescoped form of the regularized-BC gradient.

    Builds a random tanh network and random demonstration rollouts that all
    start at one shared observation and end in absorbing states, then compares
    the full gradient of the regularized BC loss against
    ``N grad V(s0) + lambda_demo grad delta2(demo, 1/(2 lambda_demo))
    + lambda_samp grad delta2(samp, 0)``. Both sides are also compared with
    central finite differences.
    """
    sizes = sizes or IdentitySizes()
    rng = _stream(seed, 7)
    net = approx.Network.init((sizes.obs_dim, sizes.hidden, sizes.actions), rng)
    # wider weights so the softmax is far from uniform
    net = approx.unflatten(net.layer_sizes, 2.0 * approx.flatten(net))
    q = SoftQFunction.approx(net)
    if lambda_samp is None:
        lambda_samp = float(rng.uniform(0.1, 2.0))
    s0 = rng.normal(size=sizes.obs_dim)
    demo, samp = _rand_transitions(rng, sizes, s0)
    lhs_terms, rhs_terms = identity_sides(q, demo, samp, s0, sizes.rollouts,
                                          lambda_demo, lambda_samp)
    _, lhs = objective(q, lhs_terms, full_gradient=True)
    _, rhs = objective(q, rhs_terms, full_gradient=True)
    analytic = approx.max_relative_error(lhs, rhs)

    theta0 = q.get_params()
    probe = q.copy()

    def scalar(terms):
        def f(theta):
            probe.set_params(theta)
            return objective(probe, terms, need_grad=False)[0]
        return f

    fd_lhs = approx.max_relative_error(lhs, approx.numerical_gradient(scalar(lhs_terms),
                                                                       theta0, epsilon))
    fd_rhs = approx.max_relative_error(rhs, approx.numerical_gradient(scalar(rhs_terms),
                                                                       theta0, epsilon))
    report = {
        "seed": seed,
        "n_params": q.n_params,
        "n_demo_transitions": len(demo),
        "lambda_demo": lambda_demo,
        "lambda_samp": lambda_samp,
        "analytic_max_rel": analytic,
        "fd_lhs_max_rel": fd_lhs,
        "fd_rhs_max_rel": fd_rhs,
        "per_component": [float(x) for x in np.abs(lhs - rhs)],
        "passed": analytic <= tol and max(fd_lhs, fd_rhs) <= fd_tol,
    }
    if raise_on_failure and not report["passed"]:
        raise VerificationError(
            f"gradient identity failed for seed {seed}: analytic {analytic:.2e}, "
            f"finite-difference {max(fd_lhs, fd_rhs):.2e}", report)
    return report
