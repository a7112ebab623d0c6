"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is echoed in the terminal summary.
Run with ``pytest tests/test_acceptance.py -s`` to also see them inline.
"""
import math
import time
from collections import deque
from pathlib import Path

import numpy as np
import pytest

from sqilab import approx
from sqilab.envs import Rollout, Transition, make_gridnav, preset
from sqilab.harness import (ExperimentSpec, build_report, run_experiment,
                            verify_gradient_identity)
from sqilab.replay import ReplayBuffer
from sqilab.softq import (SoftQFunction, TabularMDP, soft_value_iteration,
                          soft_value_iteration_trace, squared_soft_bellman_error)
from sqilab.trainers import (TrainConfig, bc_loss, bc_terms, desk_config, objective,
                             rbc_terms, sqil_terms)

SEEDS = [0, 1, 2, 3, 4]
ABLATION_ROWS = ["lambda0", "gamma0", "uniform", "rbc"]


def _check(record, number, title, passed, detail):
    record(number, title, passed, detail)
    assert passed, detail


# -- 1 ------------------------------------------------------------------------------

def test_criterion_1_gradient_identity(acceptance_record):
    t0 = time.perf_counter()
    reports = [verify_gradient_identity(seed, lambda_demo=0.5) for seed in range(20)]
    elapsed = time.perf_counter() - t0
    analytic = max(r["analytic_max_rel"] for r in reports)
    fd = max(max(r["fd_lhs_max_rel"], r["fd_rhs_max_rel"]) for r in reports)
    ok = analytic <= 1e-6 and fd <= 1e-4 and elapsed < 10
    _check(acceptance_record, 1, "gradient identity", ok,
           f"20 instances, analytic {analytic:.1e} <= 1e-6, fd {fd:.1e} <= 1e-4, "
           f"{elapsed:.2f}s < 10s")


# -- 2 ------------------------------------------------------------------------------

def test_criterion_2_loss_oracles(acceptance_record):
    t0 = time.perf_counter()
    errs = []
    for n_a in (2, 3, 4, 5):
        q = SoftQFunction.tabular(1, n_a)
        demo = [Transition(np.zeros(1), n_a - 1, np.zeros(1), True, 0, 0)]
        errs.append(abs(bc_loss(q, demo) - math.log(n_a)))
    bc_err = max(errs)

    q = SoftQFunction.tabular(2, 2)
    t = Transition(np.zeros(1), 0, np.zeros(1), False, 0, 1)
    delta_err = abs(squared_soft_bellman_error(q, [t], 1.0, 0.9) - (1 + 0.9 * math.log(2)) ** 2)

    r, gamma = 1.7, 0.9
    mdp = TabularMDP(np.ones((1, 1, 1)), np.array([[r]]), np.array([False]))
    fp_err = abs(soft_value_iteration(mdp, gamma).table[0, 0] - r / (1 - gamma))
    elapsed = time.perf_counter() - t0
    # value iteration stops at a 1e-10 step; the remaining error is below 1e-10 * g/(1-g)
    ok = bc_err <= 1e-12 and delta_err <= 1e-12 and fp_err <= 1e-8 and elapsed < 1
    _check(acceptance_record, 2, "loss-value oracles", ok,
           f"bc {bc_err:.1e}, delta2 {delta_err:.1e}, fixed point {fp_err:.1e}, "
           f"{elapsed:.3f}s < 1s")


# -- 3 ------------------------------------------------------------------------------

def _random_batch(rng, n, obs_dim, n_actions):
    return [Transition(rng.normal(size=obs_dim), int(rng.integers(n_actions)),
                       rng.normal(size=obs_dim), bool(rng.random() < 0.3), 0, 0)
            for _ in range(n)]


def _fd_error(q, terms, full_gradient, target=None):
    _, grad = objective(q, terms, full_gradient=full_gradient, target=target)
    probe = q.copy()

    def f(theta):
        probe.set_params(theta)
        return objective(probe, terms, need_grad=False, target=target)[0]

    return approx.max_relative_error(grad, approx.numerical_gradient(f, q.get_params()))


def test_criterion_3_trainer_gradients(acceptance_record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"sqil": 0.0, "bc": 0.0, "rbc": 0.0}
    trials = 0
    for _ in range(20):
        obs_dim, n_actions = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        sizes = (obs_dim, int(rng.integers(2, 8)), int(rng.integers(2, 8)), n_actions)
        q = SoftQFunction.approx(approx.Network.init(sizes, rng))
        demo = _random_batch(rng, int(rng.integers(1, 9)), obs_dim, n_actions)
        samp = _random_batch(rng, int(rng.integers(1, 9)), obs_dim, n_actions)
        cfg = TrainConfig(gamma=float(rng.uniform(0, 1)), lambda_samp=float(rng.uniform(0, 2)),
                          lambda_demo=float(rng.uniform(0.1, 2)),
                          demo_reward=float(rng.uniform(0.5, 30)))
        for reduction in ("mean", "sum"):
            built = {"sqil": sqil_terms(demo, samp, cfg, reduction),
                     "bc": bc_terms(demo, reduction),
                     "rbc": rbc_terms(demo, samp, cfg, reduction)}
            for name, terms in built.items():
                e_full = _fd_error(q, terms, full_gradient=True)
                e_semi = _fd_error(q, terms, full_gradient=False, target=q.copy())
                worst[name] = max(worst[name], e_full, e_semi)
        trials += 1
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    _check(acceptance_record, 3, "trainer loss gradients", ok,
           f"{trials} nets/batches, {detail} <= 1e-4, {elapsed:.2f}s < 30s")


# -- 4 ------------------------------------------------------------------------------

def test_criterion_4_expert_contraction(acceptance_record):
    env = make_gridnav(preset("shifted-start"))
    gamma = 0.95
    t0 = time.perf_counter()
    q, res = soft_value_iteration_trace(env, gamma, tol=1e-10)
    elapsed = time.perf_counter() - t0
    floor = 4 * np.finfo(float).eps * np.abs(q.table).max()
    ratios = [b / a for a, b in zip(res, res[1:]) if a > 0]
    excess = max(b - gamma * a for a, b in zip(res, res[1:]))
    ok = excess <= floor and res[-1] <= 1e-10 and elapsed < 5
    _check(acceptance_record, 4, "soft value iteration contraction", ok,
           f"{len(res)} sweeps, max ratio {max(ratios):.6f} vs gamma {gamma} "
           f"(rounding floor {floor:.1e}), final residual {res[-1]:.1e}, {elapsed:.2f}s < 5s")


# -- 5 and 6 share the trained grids -------------------------------------------------

def _grid(out: Path, scenario: str, algorithms: list[str]):
    spec = ExperimentSpec(scenario=scenario, algorithms=algorithms, seeds=SEEDS,
                          output_dir=str(out), demo_count=100, eval_episodes=100,
                          expert_gamma=0.95, train=desk_config())
    t0 = time.perf_counter()
    run_experiment(spec)
    summary = build_report(out, algorithms, SEEDS)
    return summary, time.perf_counter() - t0


@pytest.fixture(scope="module")
def shifted_main(tmp_path_factory):
    return _grid(tmp_path_factory.mktemp("shifted"), "shifted-start", ["sqil", "bc"])


@pytest.fixture(scope="module")
def matched_main(tmp_path_factory):
    return _grid(tmp_path_factory.mktemp("matched"), "matched-start", ["sqil", "bc"])


@pytest.fixture(scope="module")
def shifted_ablations(tmp_path_factory):
    return _grid(tmp_path_factory.mktemp("ablations"), "shifted-start", ABLATION_ROWS)


def _mean(summary, row, key="train_init"):
    mu, _, n = summary[row][key]
    assert n == len(SEEDS), f"{row}: {n} seeds finished"
    return mu


@pytest.mark.slow
def test_criterion_5_domain_shift(shifted_main, matched_main, acceptance_record):
    (shift, t_shift), (match, t_match) = shifted_main, matched_main
    expert_s, sqil_s, bc_s = (_mean(shift, r) for r in ("expert", "sqil", "bc"))
    expert_m, sqil_m, bc_m = (_mean(match, r) for r in ("expert", "sqil", "bc"))
    elapsed = t_shift + t_match
    ok = (sqil_s >= expert_s - 0.15 and sqil_s - bc_s >= 0.3
          and abs(bc_m - expert_m) <= 0.1 and abs(sqil_m - expert_m) <= 0.1
          and elapsed < 600)
    _check(acceptance_record, 5, "domain-shift trend", ok,
           f"shifted: expert {expert_s:.3f}, SQIL {sqil_s:.3f}, BC {bc_s:.3f}; "
           f"matched: expert {expert_m:.3f}, SQIL {sqil_m:.3f}, BC {bc_m:.3f}; "
           f"{elapsed:.0f}s < 600s")


@pytest.mark.slow
def test_criterion_6_ablation_ordering(shifted_main, shifted_ablations, acceptance_record):
    (shift, t_shift), (abl, t_abl) = shifted_main, shifted_ablations
    sqil = _mean(shift, "sqil")
    rows = {r: _mean(abl, r) for r in ABLATION_ROWS}
    elapsed = t_shift + t_abl
    ok = (sqil > rows["lambda0"] and all(sqil >= rows[r] for r in ("gamma0", "uniform", "rbc"))
          and elapsed < 1200)
    detail = ", ".join(f"{k} {v:.3f}" for k, v in rows.items())
    _check(acceptance_record, 6, "ablation ordering under shift", ok,
           f"SQIL {sqil:.3f}; {detail}; {elapsed:.0f}s < 1200s")


# -- 7 ------------------------------------------------------------------------------

def test_criterion_7_replay_invariants(acceptance_record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    demos = [Rollout([Transition(np.zeros(1), 0, np.zeros(1), j == 4, 10 * k + j, 0)
                      for j in range(5)], "goal") for k in range(4)]
    capacity = 97
    buf = ReplayBuffer.init_with_demos(demos, capacity=capacity)
    frozen_ids = [t.state_id for t in buf.demo]
    frozen_tuple = buf.demo
    model = deque(maxlen=capacity)
    counter, violations, ops = 10_000, [], 10_000
    for i in range(ops):
        if rng.random() < 0.6:
            buf.append(Transition(np.zeros(1), 1, np.zeros(1), False, counter, 0))
            model.append(counter)
            counter += 1
            if [t.state_id for t in buf.samp] != list(model):
                violations.append(f"FIFO order at op {i}")
        else:
            half = int(rng.integers(1, 33))
            demo, samp = buf.sample_balanced(2 * half, rng)
            if len(demo) != half or len(samp) != (half if model else 0):
                violations.append(f"batch composition at op {i}")
            if any(t.state_id not in frozen_ids for t in demo):
                violations.append(f"demo draw outside partition at op {i}")
        if buf.demo is not frozen_tuple:
            violations.append(f"demo partition replaced at op {i}")
    if [t.state_id for t in buf.demo] != frozen_ids:
        violations.append("demo contents changed")
    elapsed = time.perf_counter() - t0
    ok = not violations and elapsed < 5
    _check(acceptance_record, 7, "replay invariants", ok,
           f"{ops} operations, {len(violations)} violations, {elapsed:.2f}s < 5s")


# -- 8 ------------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path, acceptance_record):
    train = desk_config(max_gradient_steps=200, eval_every=50)
    outs = []
    for name in ("a", "b"):
        spec = ExperimentSpec(scenario="shifted-start", algorithms=["sqil", "bc", "rbc"],
                              seeds=[0, 1], output_dir=str(tmp_path / name),
                              demo_count=20, eval_episodes=20, train=train)
        outs.append(run_experiment(spec))
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*.csv"))
    differing = [str(f) for f in files if (outs[0] / f).read_bytes() != (outs[1] / f).read_bytes()]
    # 3 algorithms x 2 seeds curves, baselines.csv and summary.csv
    ok = len(files) == 8 and not differing
    _check(acceptance_record, 8, "determinism", ok,
           f"{len(files)} metric CSVs compared, {len(differing)} differ")
