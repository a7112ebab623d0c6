import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sqilab.envs import GridNavConfig, InitDist, Transition, make_gridnav, preset
from sqilab.errors import ContractError, NumericalError
from sqilab.softq import (SoftQFunction, TabularMDP, bellman_residual, boltzmann_policy,
                          export_q_csv, implied_reward, load_q_csv, soft_value,
                          soft_value_iteration, soft_value_iteration_trace,
                          squared_soft_bellman_error)


def tr(s, a, s2, absorbing=False, obs_dim=1):
    return Transition(np.zeros(obs_dim), a, np.zeros(obs_dim), absorbing, s, s2)


def deterministic_env():
    return make_gridnav(GridNavConfig(
        width=4, height=3, goal_cells=frozenset({3}), hazard_cells=frozenset({7}),
        walls=frozenset({5}), demo_init=InitDist(((8, 1.0),)),
        train_init=InitDist(((0, 1.0),)), slip_prob=0.0, step_limit=15,
        goal_reward=10.0, step_reward=-1.0, hazard_reward=-10.0))


# -- soft value and policy --------------------------------------------------------

def test_soft_value_examples():
    assert soft_value([0.0, 0.0]) == pytest.approx(math.log(2), abs=1e-15)
    assert soft_value([3.25]) == 3.25
    assert soft_value([1000.0, 1000.0]) == pytest.approx(1000 + math.log(2), abs=1e-12)


def test_soft_value_empty():
    with pytest.raises(ContractError):
        soft_value([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(-100, 100))
def test_soft_value_shift(q, c):
    q = np.array(q)
    assert soft_value(q + c) == pytest.approx(soft_value(q) + c, abs=1e-9)


def test_boltzmann_examples():
    np.testing.assert_allclose(boltzmann_policy([1.0, 1.0]), [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(boltzmann_policy([math.log(2), 0.0]), [2 / 3, 1 / 3],
                               atol=1e-15)
    q = np.array([0.3, -1.2, 2.0, 0.0])
    np.testing.assert_allclose(boltzmann_policy(q + 5), boltzmann_policy(q), atol=1e-12)


# -- Bellman error ----------------------------------------------------------------

def test_bellman_hand_case():
    Q = SoftQFunction.tabular(2, 2)
    val = squared_soft_bellman_error(Q, [tr(0, 0, 1)], 1.0, 0.9)
    assert abs(val - (1 + 0.9 * math.log(2)) ** 2) <= 1e-12
    assert val == pytest.approx(2.63683, abs=1e-5)


def test_bellman_zero_case():
    Q = SoftQFunction.tabular(2, 2)
    assert squared_soft_bellman_error(Q, [tr(0, 1, 1, absorbing=True)], 0.0, 0.9) == 0.0


def test_bellman_empty_batch():
    with pytest.raises(ContractError):
        squared_soft_bellman_error(SoftQFunction.tabular(2, 2), [], 1.0, 0.9)


def test_bellman_sum_vs_mean():
    Q = SoftQFunction.tabular(3, 2, table=np.arange(6.0).reshape(3, 2))
    batch = [tr(0, 0, 1), tr(1, 1, 2), tr(2, 0, 0, absorbing=True)]
    s = squared_soft_bellman_error(Q, batch, 0.5, 0.7, reduction="sum")
    m = squared_soft_bellman_error(Q, batch, 0.5, 0.7)
    assert s == pytest.approx(3 * m, rel=1e-14)


def test_exact_expert_has_zero_bellman_error():
    env = deterministic_env()
    gamma = 0.9
    q = soft_value_iteration(env, gamma)
    rng = np.random.default_rng(0)
    live = [c for c in env.open_cells if not env.absorbing[c]]
    batch, rewards = [], []
    for _ in range(200):
        s = int(rng.choice(live))
        a = int(rng.integers(env.n_actions))
        s2 = int(np.argmax(env.transitions[s, a]))
        batch.append(tr(s, a, s2, bool(env.absorbing[s2])))
        rewards.append(env.cell_reward(s2))
    err = squared_soft_bellman_error(q, batch, np.array(rewards), gamma)
    assert err <= 1e-10


# -- implied reward ---------------------------------------------------------------

def test_implied_reward_cases():
    Q0 = SoftQFunction.tabular(2, 2)
    assert implied_reward(Q0, tr(0, 0, 1), 0.9) == pytest.approx(-0.9 * math.log(2))
    Q = SoftQFunction.tabular(2, 2, table=[[1.5, -2.0], [0.0, 3.0]])
    assert implied_reward(Q, tr(0, 1, 1), 0.0) == -2.0


def test_implied_reward_recovers_true_reward():
    env = deterministic_env()
    gamma = 0.8
    q = soft_value_iteration(env, gamma)
    for s in env.open_cells:
        if env.absorbing[s]:
            continue
        for a in range(env.n_actions):
            s2 = int(np.argmax(env.transitions[s, a]))
            r = implied_reward(q, tr(s, a, s2, bool(env.absorbing[s2])), gamma)
            assert abs(r - env.rewards[s, a]) <= 1e-10


# -- soft value iteration ---------------------------------------------------------

def test_single_state_fixed_point():
    r = 2.5
    mdp = TabularMDP(np.ones((1, 1, 1)), np.array([[r]]), np.array([False]))
    q = soft_value_iteration(mdp, 0.9)
    assert q.table[0, 0] == pytest.approx(r / (1 - 0.9), abs=1e-8)


def test_gamma_zero_gives_rewards():
    env = deterministic_env()
    q = soft_value_iteration(env, 0.0)
    np.testing.assert_array_equal(q.table, env.rewards)


def test_contraction_on_preset():
    env = make_gridnav(preset("shifted-start"))
    gamma = 0.95
    q, res = soft_value_iteration_trace(env, gamma)
    assert res[-1] <= 1e-10
    # slack is the rounding floor of a backup at this value scale
    floor = 4 * np.finfo(float).eps * np.abs(q.table).max()
    for a, b in zip(res, res[1:]):
        assert b <= gamma * a + floor
    assert bellman_residual(env, q.table, gamma) <= 1e-10


def test_non_convergence_is_numerical_error():
    env = make_gridnav(preset("shifted-start"))
    with pytest.raises(NumericalError, match="residual"):
        soft_value_iteration(env, 0.95, max_sweeps=3)


def test_q_csv_round_trip(tmp_path):
    table = np.random.default_rng(1).normal(size=(6, 5))
    path = tmp_path / "q.csv"
    export_q_csv(table, path, ["up", "right", "down", "left", "stay"])
    assert path.read_text().splitlines()[0] == "state,up,right,down,left,stay"
    np.testing.assert_array_equal(load_q_csv(path), table)
