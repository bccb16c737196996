from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from apdo.cmdp import Trajectory, Transition
from apdo.offpolicy import (Batch, DualTrace, OffPolicyConfig, PdDdpgNets, ReplayBuffer, actor_dual_update,
                            critic_targets, critic_update, explore_action, pd_ddpg_iteration, train_lambda_off,
                            update_targets)
from apdo.onpolicy import TabularSoftmaxPolicy, sample_batch

TINY = OffPolicyConfig(critic_hidden=(8,), actor_hidden=(8,), minibatch=16)
CHAIN = OffPolicyConfig(off_iterations=10_000, tau=0.01, dual_lr_off=1e-3, critic_hidden=(16, 16),
                        actor_hidden=(16,))


def transition(i, m=1):
    return Transition(np.array([float(i)]), i % 2, float(i), np.full(m, 0.5 * i), np.array([i + 1.0]), False)


def one_hot_batch(actions, rewards, costs, terminals, S=3):
    n = len(actions)
    s = np.eye(S)[np.arange(n) % S]
    return Batch(s, np.asarray(actions), np.asarray(rewards, float), np.asarray(costs, float).reshape(n, -1),
                 s, np.asarray(terminals, bool))


def nets_for(cfg=TINY, obs_dim=3, actions=2, lam=None, seed=0):
    return PdDdpgNets(obs_dim, actions, 1, cfg, np.random.default_rng(seed), lam=lam)


def test_fifo_eviction():
    buf = ReplayBuffer(3)
    for i in range(4):
        buf.push(transition(i))
    assert len(buf) == 3
    assert [t.reward for t in buf.contents()] == [1.0, 2.0, 3.0]


def test_defaults():
    cfg = OffPolicyConfig()
    assert cfg.minibatch == 64 and cfg.dual_lr_off == 1e-2 and cfg.tau == 0.001
    assert cfg.buffer_capacity == 100_000


def test_sampling_reproducible_and_guarded():
    buf = ReplayBuffer(10)
    with pytest.raises(ValueError):
        buf.sample(4, np.random.default_rng(0))
    for i in range(7):
        buf.push(transition(i))
    a = buf.sample(32, np.random.default_rng(5))
    b = buf.sample(32, np.random.default_rng(5))
    np.testing.assert_array_equal(a.rewards, b.rewards)
    assert set(a.rewards) <= set(range(7))


def test_sampling_is_uniform():
    buf = ReplayBuffer(5)
    for i in range(5):
        buf.push(transition(i))
    counts = np.bincount(buf.sample(50_000, np.random.default_rng(0)).rewards.astype(int), minlength=5)
    assert np.all(np.abs(counts / 50_000 - 0.2) < 0.01)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.lists(st.integers(0, 12), max_size=12))
def test_fifo_matches_deque(capacity, chunks):
    buf = ReplayBuffer(capacity)
    ref = deque(maxlen=capacity)
    counter = 0
    for size in chunks:
        items = [transition(counter + j) for j in range(size)]
        counter += size
        if size % 2:
            for t in items:
                buf.push(t)
        elif items:
            buf.extend(Trajectory.from_transitions(items))
        ref.extend(t.reward for t in items)
        assert [t.reward for t in buf.contents()] == list(ref)


def test_critic_targets_arithmetic():
    nets = nets_for()
    for net in (nets.target_r, *nets.targets_c):
        net.params[:] = 0.0
        net.biases[-1][:] = 2.0
    b = one_hot_batch([0, 1], [1.0, 1.0], [0.5, 0.5], [False, True])
    y, z = critic_targets(b, nets, 0.99)
    np.testing.assert_allclose(y, [2.98, 1.0])
    np.testing.assert_allclose(z[:, 0], [0.5 + 0.99 * 2, 0.5])
    y0, z0 = critic_targets(b, nets, 0.0)
    np.testing.assert_array_equal(y0, b.rewards)
    np.testing.assert_array_equal(z0, b.costs)


def test_critic_update_at_fixed_point():
    nets = nets_for()
    b = one_hot_batch([0, 1, 1], [0, 0, 0], [0, 0, 0], [False] * 3)
    x = nets.encode(b.states)
    y = nets.critic_r.forward(x)[np.arange(3), b.actions]
    z = np.stack([nets.critics_c[0].forward(x)[np.arange(3), b.actions]], axis=1)
    before = nets.critic_r.params.copy()
    loss_r, loss_c = critic_update(nets, b, y, z)
    assert loss_r == 0.0 and loss_c[0] == 0.0
    np.testing.assert_array_equal(nets.critic_r.params, before)


def test_critic_loss_is_exact_mse():
    nets = nets_for()
    b = one_hot_batch([0, 1], [0, 0], [0, 0], [False, False])
    q = nets.critic_r.forward(nets.encode(b.states))[[0, 1], [0, 1]]
    y = np.array([1.0, -2.0])
    loss_r, _ = critic_update(nets, b, y, np.zeros((2, 1)))
    assert loss_r == pytest.approx(np.mean((q - y) ** 2))


def test_critic_regression_fixed_point():
    nets = nets_for(OffPolicyConfig(critic_hidden=(8,), actor_hidden=(8,), critic_lr=1e-2), obs_dim=1)
    b = one_hot_batch([1] * 8, [3.0] * 8, [1.0] * 8, [True] * 8, S=1)
    for _ in range(2000):
        critic_update(nets, b, np.full(8, 3.0), np.ones((8, 1)))
    q = nets.critic_r.forward(nets.encode(b.states[:1]))[0, 1]
    assert q == pytest.approx(3.0, abs=1e-3)


def test_dual_zero_subgradient():
    nets = nets_for(lam=[0.0])
    for net in nets.critics_c:
        net.params[:] = 0.0
        net.biases[-1][:] = 2.0
    b = one_hot_batch([0, 1], [0, 0], [0, 0], [False, False])
    lam = actor_dual_update(nets, b, [2.0])
    assert lam[0] == pytest.approx(0.0, abs=1e-12)
    nets.lam = np.array([1.5])
    assert actor_dual_update(nets, b, [2.0])[0] == pytest.approx(1.5)
    assert len(nets.trace) == 2


def test_dual_mean_of_two_cost_values():
    nets = nets_for(lam=[0.0])
    c = nets.critics_c[0]
    c.params[:] = 0.0
    c.biases[-1][:] = [3.0, 1.0]
    nets.actor.params[:] = 0.0  # uniform policy -> Q_C(s, mu(s)) = 2 everywhere
    lam = actor_dual_update(nets, one_hot_batch([0, 1], [0, 0], [0, 0], [False, False]), [2.0])
    assert lam[0] == pytest.approx(0.0, abs=1e-12)


def test_zero_lambda_actor_follows_reward_critic():
    nets = nets_for(lam=[0.0], actions=3)
    nets.critic_r.params[:] = 0.0
    nets.critic_r.biases[-1][:] = [0.0, 1.0, 0.0]
    for c in nets.critics_c:
        c.params[:] = 0.0
        c.biases[-1][:] = [0.0, 100.0, 0.0]
    b = one_hot_batch([0, 1, 2], [0] * 3, [0] * 3, [False] * 3)
    for _ in range(300):
        nets.lam = np.zeros(1)
        actor_dual_update(nets, b, [1e6])
    assert np.all(nets.policy(nets.encode(b.states)).argmax(axis=1) == 1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 5), st.floats(0, 20))
def test_projection_keeps_lambda_nonnegative(seed, lam0, d):
    rng = np.random.default_rng(seed)
    nets = nets_for(lam=[lam0], seed=seed)
    b = one_hot_batch(rng.integers(2, size=8), rng.standard_normal(8), rng.random(8), rng.random(8) < 0.2)
    for _ in range(5):
        pd_ddpg_iteration(nets, b, 0.9, [d])
        assert nets.lam[0] >= 0
    assert all(v[0] >= 0 for v in nets.trace.values)


def test_targets_track_frozen_learner():
    nets = nets_for(OffPolicyConfig(critic_hidden=(8,), actor_hidden=(8,), tau=0.1))
    gaps = []
    for _ in range(5):
        update_targets(nets)
        gaps.append(np.linalg.norm(nets.target_r.params - nets.critic_r.params))
    nets.critic_r.params[:] += 1.0
    gaps.append(np.linalg.norm(nets.target_r.params - nets.critic_r.params))
    update_targets(nets)
    assert np.linalg.norm(nets.target_r.params - nets.critic_r.params) < gaps[-1]


def test_dual_trace_average():
    trace = DualTrace()
    for v in (0.0, 1.0, 2.0):
        trace.append(v)
    np.testing.assert_array_equal(trace.average(), [1.0])
    with pytest.raises(ValueError):
        trace.append(-1.0)
    with pytest.raises(ValueError):
        DualTrace().average()


def test_train_requires_data(chain_env):
    with pytest.raises(ValueError):
        train_lambda_off(ReplayBuffer(10), chain_env, TINY, np.random.default_rng(0), 0.9)


def test_explore_action_valid():
    nets = nets_for(actions=4)
    a = explore_action(nets, np.eye(3), 0.1, np.random.default_rng(0))
    assert a.shape == (3,) and np.all((a >= 0) & (a < 4))


def test_lambda_off_near_optimum_from_uniform_buffer(chain_env):
    buf = ReplayBuffer(CHAIN.buffer_capacity)
    for t in sample_batch(chain_env, TabularSoftmaxPolicy(1, 2), 6000, np.random.default_rng(0)):
        buf.extend(t)
    result = train_lambda_off(buf, chain_env, CHAIN, np.random.default_rng(1), 0.9)
    assert len(result.trace) == CHAIN.off_iterations
    assert 6.0 <= result.lambda_off[0] <= 12.0
    np.testing.assert_allclose(result.lambda_off, result.trace.average())
