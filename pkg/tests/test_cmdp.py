import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apdo.cmdp import (CmdpError, DualState, TabularCmdp, Trajectory, Transition, discounted_sum,
                       evaluate_policy_exact, lagrangian_value, trajectory_cost, trajectory_return,
                       truncation_horizon)
from apdo.envs import TabularEnv
from apdo.oracle import random_cmdp


def bernoulli(p):
    return np.array([[1.0 - p, p]])


@pytest.mark.parametrize("values, gamma, expected", [
    ([0, 0, 0], 0.9, 0.0),
    ([10], 0.995, 10.0),
    ([1, 2], 0.5, 2.0),
    ([], 0.9, 0.0),
])
def test_discounted_sum(values, gamma, expected):
    assert discounted_sum(values, gamma) == expected


def one_step(reward, cost):
    return Trajectory.from_transitions([Transition(0, 0, reward, np.array([cost]), 1, True)])


def test_single_pickup_trajectories():
    assert trajectory_cost(one_step(0.0, 1.0), 0.995)[0] == 1.0
    assert trajectory_return(one_step(10.0, 0.0), 0.995) == 10.0


def test_empty_trajectory():
    t = Trajectory.from_transitions([], m=1)
    assert trajectory_return(t, 0.9) == 0.0
    np.testing.assert_array_equal(trajectory_cost(t, 0.9), [0.0])


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.floats(0, 0.99))
def test_cost_channel_matches_return(values, gamma):
    n = len(values)
    t = Trajectory(np.zeros(n, int), np.zeros(n, int), np.array(values), np.array(values)[:, None],
                   np.zeros(n, int), np.zeros(n, bool))
    assert trajectory_cost(t, gamma)[0] == pytest.approx(trajectory_return(t, gamma), abs=1e-12)


def test_trajectory_chaining():
    steps = [Transition(0, 1, 1.0, np.zeros(1), 2, False), Transition(2, 0, 0.0, np.zeros(1), 3, False)]
    assert Trajectory.from_transitions(steps).is_chained()
    broken = [steps[0], Transition(5, 0, 0.0, np.zeros(1), 3, False)]
    assert not Trajectory.from_transitions(broken).is_chained()
    assert [tr.state for tr in Trajectory.from_transitions(steps)] == [0, 2]


def test_risky_chain_exact_values(chain):
    R, C = evaluate_policy_exact(chain, bernoulli(0.0))
    assert (R, C[0]) == pytest.approx((10.0, 0.0))
    R, C = evaluate_policy_exact(chain, bernoulli(1.0))
    assert (R, C[0]) == pytest.approx((100.0, 10.0))


def test_zero_reward_cmdp_has_zero_return():
    c = random_cmdp(3, 4, 3)
    zero = TabularCmdp(c.transition, np.zeros_like(c.reward), c.costs, c.limits, c.gamma, c.initial_dist)
    assert evaluate_policy_exact(zero, np.full((4, 3), 1 / 3))[0] == 0.0


def test_exact_evaluation_matches_monte_carlo():
    cmdp = random_cmdp(7, 5, 2, gamma=0.8)
    policy = np.random.default_rng(0).dirichlet(np.ones(2), size=5)
    env = TabularEnv(cmdp)
    rng = np.random.default_rng(1)
    n = 100_000
    s = env.reset_batch(n, rng)
    ret = np.zeros(n)
    cost = np.zeros(n)
    disc = 1.0
    cdf = np.cumsum(policy, axis=1)
    for _ in range(env.max_steps):
        a = (rng.random(n)[:, None] > cdf[s]).sum(axis=1)
        s, r, c, _ = env.step_batch(s, a, rng)
        ret += disc * r
        cost += disc * c[:, 0]
        disc *= cmdp.gamma
    R, C = evaluate_policy_exact(cmdp, policy)
    assert abs(ret.mean() - R) <= 3 * ret.std() / np.sqrt(n)
    assert abs(cost.mean() - C[0]) <= 3 * cost.std() / np.sqrt(n)


def test_lagrangian_value_examples():
    assert lagrangian_value(3.5, [1.0, 2.0], [0.5, 0.5], [0.0, 0.0]) == 3.5
    assert lagrangian_value(11.0, [0.2], [0.2], [5.0]) == 11.0
    assert lagrangian_value(0.0, [1.0], [0.0], [2.0]) == -2.0


def test_lagrangian_value_contract():
    with pytest.raises(ValueError):
        lagrangian_value(1.0, [1.0, 2.0], [0.0], [1.0])
    with pytest.raises(ValueError):
        lagrangian_value(1.0, [1.0], [0.0], [-1.0])


@given(st.floats(-50, 50), st.floats(0, 20), st.floats(0, 20), st.floats(0, 10), st.floats(0, 10))
def test_lagrangian_affine_in_lambda(R, C, d, l1, l2):
    mid = lagrangian_value(R, [C], [d], [(l1 + l2) / 2])
    ends = (lagrangian_value(R, [C], [d], [l1]) + lagrangian_value(R, [C], [d], [l2])) / 2
    assert mid == pytest.approx(ends, abs=1e-9)


def test_cmdp_validation(chain):
    with pytest.raises(CmdpError):
        TabularCmdp(chain.transition * 2, chain.reward, chain.costs, chain.limits, 0.9, chain.initial_dist)
    with pytest.raises(CmdpError):
        TabularCmdp(chain.transition, chain.reward, chain.costs, [1.0, 2.0], 0.9, chain.initial_dist)
    with pytest.raises(CmdpError):
        TabularCmdp(chain.transition, chain.reward, chain.costs, chain.limits, 1.0, chain.initial_dist)
    with pytest.raises(ValueError):
        chain.transition[0, 0, 0] = 0.5


def test_json_round_trip(tmp_path):
    c = random_cmdp(2, 3, 2)
    path = tmp_path / "c.json"
    c.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"num_states", "num_actions", "transition", "reward", "costs", "limits", "gamma",
                        "initial_dist"}
    back = TabularCmdp.load(path)
    np.testing.assert_array_equal(back.transition, c.transition)
    np.testing.assert_array_equal(back.costs[0], c.costs[0])
    assert back.gamma == c.gamma
    doc["num_states"] = 7
    with pytest.raises(CmdpError):
        TabularCmdp.from_json(doc)


def test_dual_state():
    dual = DualState.zeros(2)
    dual.record(np.array([0.5, 0.0]))
    dual.record(np.array([1.0, 0.2]))
    assert len(dual.history) == 2
    dual.overwrite(np.array([3.0, -1.0]))
    np.testing.assert_array_equal(dual.lam, [3.0, 0.0])
    assert len(dual.history) == 2
    with pytest.raises(ValueError):
        dual.record(np.array([-0.1, 0.0]))
    with pytest.raises(ValueError):
        DualState(np.array([np.nan]))


@settings(max_examples=50)
@given(st.floats(0.0, 0.999), st.floats(1e-3, 1e3))
def test_truncation_horizon_bound(gamma, scale):
    h = truncation_horizon(gamma, scale)
    assert gamma ** h * scale <= 1e-3 or h == 1 and scale <= 1e-3
    if h > 1:
        assert gamma ** (h - 1) * scale > 1e-3 * (1 - 1e-9)


def test_risky_chain_horizon(chain_env):
    assert chain_env.max_steps == 88
