"""Replay buffer and primal-dual DDPG for training the off-policy dual variable.

Actions are discrete here, so the actor outputs logits and every
``Q(s, mu(s))`` term is the expectation ``sum_a pi(a|s) Q(s, a)`` over the
actor's softmax; critics output one Q-value per action.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .cmdp import Trajectory, Transition
from .nn import AdamState, Mlp, adam_step, soft_update
from .onpolicy import softmax


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray  # (N, m)
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self):
        return len(self.actions)


class ReplayBuffer:
    """Bounded FIFO transition store with uniform sampling (with replacement)."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._data: dict[str, np.ndarray] | None = None
        self._next = 0  # slot for the next write
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _allocate(self, state, cost) -> None:
        state = np.asarray(state)
        m = np.atleast_1d(cost).shape[0]
        cap = self.capacity
        self._data = {
            "states": np.zeros((cap, *state.shape), dtype=state.dtype),
            "actions": np.zeros(cap, dtype=np.int64),
            "rewards": np.zeros(cap),
            "costs": np.zeros((cap, m)),
            "next_states": np.zeros((cap, *state.shape), dtype=state.dtype),
            "terminals": np.zeros(cap, dtype=bool),
        }

    def push(self, t: Transition) -> None:
        if self._data is None:
            self._allocate(t.state, t.cost)
        i = self._next
        d = self._data
        d["states"][i] = t.state
        d["actions"][i] = t.action
        d["rewards"][i] = t.reward
        d["costs"][i] = np.atleast_1d(t.cost)
        d["next_states"][i] = t.next_state
        d["terminals"][i] = t.terminal
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def extend(self, traj: Trajectory) -> None:
        n = len(traj)
        if n == 0:
            return
        if self._data is None:
            self._allocate(traj.states[0], traj.costs[0])
        if n > self.capacity:
            traj = Trajectory(traj.states[-self.capacity:], traj.actions[-self.capacity:],
                              traj.rewards[-self.capacity:], traj.costs[-self.capacity:],
                              traj.next_states[-self.capacity:], traj.terminals[-self.capacity:])
            self._size = min(self._size + n - self.capacity, self.capacity)
            self._next = (self._next + n - self.capacity) % self.capacity
            n = self.capacity
        slots = (self._next + np.arange(n)) % self.capacity
        d = self._data
        d["states"][slots] = traj.states
        d["actions"][slots] = traj.actions
        d["rewards"][slots] = traj.rewards
        d["costs"][slots] = traj.costs
        d["next_states"][slots] = traj.next_states
        d["terminals"][slots] = traj.terminals
        self._next = (self._next + n) % self.capacity
        self._size = min(self._size + n, self.capacity)

    def _ordered_slots(self) -> np.ndarray:
        start = (self._next - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        slots = self._ordered_slots()[rng.integers(0, self._size, size=n)]
        d = self._data
        return Batch(d["states"][slots], d["actions"][slots], d["rewards"][slots], d["costs"][slots],
                     d["next_states"][slots], d["terminals"][slots])

    def contents(self) -> list[Transition]:
        """Stored transitions, oldest first."""
        if self._data is None:
            return []
        d = self._data
        return [Transition(d["states"][i], int(d["actions"][i]), float(d["rewards"][i]), d["costs"][i].copy(),
                           d["next_states"][i], bool(d["terminals"][i])) for i in self._ordered_slots()]


@dataclass(frozen=True)
class OffPolicyConfig:
    buffer_capacity: int = 100_000
    minibatch: int = 64
    tau: float = 0.001
    critic_lr: float = 1e-3
    actor_lr: float = 1e-3
    dual_lr_off: float = 1e-2
    off_iterations: int = 50_000
    explore_sigma: float = 0.1
    critic_hidden: tuple = (100, 100)
    actor_hidden: tuple = (64, 32)
    warm_start_dual: bool = True

    def __post_init__(self):
        if self.minibatch < 1 or self.buffer_capacity < 1 or self.off_iterations < 0:
            raise ValueError("minibatch and buffer_capacity must be >= 1, off_iterations >= 0")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.dual_lr_off <= 0 or self.critic_lr <= 0 or self.actor_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class DualTrace:
    values: list = field(default_factory=list)

    def append(self, lam) -> None:
        lam = np.atleast_1d(np.asarray(lam, dtype=np.float64)).copy()
        if np.any(lam < 0):
            raise ValueError("dual trace entries must be non-negative")
        self.values.append(lam)

    def __len__(self):
        return len(self.values)

    def average(self) -> np.ndarray:
        if not self.values:
            raise ValueError("empty dual trace")
        return np.mean(self.values, axis=0)


class PdDdpgNets:
    """Reward/cost critics, actor, their target copies, and the dual variable."""

    def __init__(self, obs_dim: int, num_actions: int, num_costs: int, cfg: OffPolicyConfig,
                 rng: np.random.Generator, encode=None, lam=None):
        self.cfg = cfg
        self.num_actions = num_actions
        self.encode = encode if encode is not None else (lambda o: np.asarray(o, dtype=np.float64))
        self.critic_r = Mlp([obs_dim, *cfg.critic_hidden, num_actions], rng)
        self.critics_c = [Mlp([obs_dim, *cfg.critic_hidden, num_actions], rng) for _ in range(num_costs)]
        self.actor = Mlp([obs_dim, *cfg.actor_hidden, num_actions], rng)
        self.target_r = self.critic_r.copy()
        self.targets_c = [c.copy() for c in self.critics_c]
        self.target_actor = self.actor.copy()
        self.opt_r = AdamState.for_params(self.critic_r.params, lr=cfg.critic_lr)
        self.opts_c = [AdamState.for_params(c.params, lr=cfg.critic_lr) for c in self.critics_c]
        self.opt_actor = AdamState.for_params(self.actor.params, lr=cfg.actor_lr)
        self.lam = np.zeros(num_costs) if lam is None else np.maximum(np.atleast_1d(lam).astype(np.float64), 0.0)
        self.trace = DualTrace()

    @property
    def num_costs(self) -> int:
        return len(self.critics_c)

    def policy(self, x: np.ndarray, target: bool = False) -> np.ndarray:
        return softmax((self.target_actor if target else self.actor).forward(x))


def critic_targets(batch: Batch, nets: PdDdpgNets, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """y = r + gamma Q'_R(s', mu'(s')), z = c + gamma Q'_C(s', mu'(s')); zero bootstrap at terminals."""
    x_next = nets.encode(batch.next_states)
    pi_next = nets.policy(x_next, target=True)
    alive = gamma * (~np.asarray(batch.terminals, dtype=bool))
    y = batch.rewards + alive * (pi_next * nets.target_r.forward(x_next)).sum(axis=1)
    z = np.stack([batch.costs[:, i] + alive * (pi_next * tc.forward(x_next)).sum(axis=1)
                  for i, tc in enumerate(nets.targets_c)], axis=1)
    return y, z


def _regress(net: Mlp, opt: AdamState, x: np.ndarray, actions: np.ndarray, target: np.ndarray) -> float:
    q = net.forward(x)
    rows = np.arange(len(actions))
    err = q[rows, actions] - target
    up = np.zeros_like(q)
    up[rows, actions] = 2.0 * err / len(err)
    grad, _ = net.backward(up)
    adam_step(net.params, grad, opt, locate=net.locate)
    return float(np.mean(err ** 2))


def critic_update(nets: PdDdpgNets, batch: Batch, y: np.ndarray, z: np.ndarray) -> tuple[float, np.ndarray]:
    """One Adam step on L_R = mean (y - Q_R)^2 and each L_C = mean (z - Q_C)^2."""
    x = nets.encode(batch.states)
    loss_r = _regress(nets.critic_r, nets.opt_r, x, batch.actions, y)
    loss_c = np.array([_regress(c, o, x, batch.actions, z[:, i])
                       for i, (c, o) in enumerate(zip(nets.critics_c, nets.opts_c))])
    if not np.isfinite(loss_r) or not np.all(np.isfinite(loss_c)):
        raise FloatingPointError("non-finite critic loss")
    return loss_r, loss_c


def actor_dual_update(nets: PdDdpgNets, batch: Batch, d) -> np.ndarray:
    """Actor ascent on mean(Q_R - lam Q_C) at mu(s) and projected dual ascent.

    Both gradients are taken at the current actor and multiplier; the new
    multiplier is appended to the dual trace and returned.
    """
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    x = nets.encode(batch.states)
    q_r = nets.critic_r.forward(x)
    q_c = np.stack([c.forward(x) for c in nets.critics_c])  # (m, N, A)
    logits = nets.actor.forward(x)
    pi = softmax(logits)
    q_l = q_r - np.einsum("m,mna->na", nets.lam, q_c)
    n = len(x)
    baseline = (pi * q_l).sum(axis=1, keepdims=True)
    up = -pi * (q_l - baseline) / n  # minus: Adam descends
    grad, _ = nets.actor.backward(up)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite actor gradient")
    dual_grad = np.einsum("na,mna->m", pi, q_c) / n - d
    adam_step(nets.actor.params, grad, nets.opt_actor, locate=nets.actor.locate)
    nets.lam = np.maximum(nets.lam + nets.cfg.dual_lr_off * dual_grad, 0.0)
    nets.trace.append(nets.lam)
    return nets.lam


def update_targets(nets: PdDdpgNets) -> None:
    tau = nets.cfg.tau
    soft_update(nets.target_r.params, nets.critic_r.params, tau)
    for t, c in zip(nets.targets_c, nets.critics_c):
        soft_update(t.params, c.params, tau)
    soft_update(nets.target_actor.params, nets.actor.params, tau)


def pd_ddpg_iteration(nets: PdDdpgNets, batch: Batch, gamma: float, d) -> tuple[float, np.ndarray]:
    y, z = critic_targets(batch, nets, gamma)
    losses = critic_update(nets, batch, y, z)
    actor_dual_update(nets, batch, d)
    update_targets(nets)
    return losses


@dataclass
class OffPolicyResult:
    lambda_off: np.ndarray
    trace: DualTrace
    nets: PdDdpgNets
    final_losses: tuple


def train_lambda_off(buffer: ReplayBuffer, env, cfg: OffPolicyConfig, rng: np.random.Generator,
                     gamma: float, lam0=None) -> OffPolicyResult:
    """Run primal-dual DDPG purely on replayed transitions; return the mean of the dual trace.

    ``lam0`` initializes the multiplier when ``cfg.warm_start_dual`` is set
    (APDO passes its current on-policy multiplier); otherwise it starts at 0.
    """
    if len(buffer) == 0:
        raise ValueError("cannot train on an empty replay buffer")
    init = lam0 if (cfg.warm_start_dual and lam0 is not None) else None
    nets = PdDdpgNets(env.obs_dim, env.num_actions, env.num_costs, cfg, rng, encode=env.encode, lam=init)
    losses = (np.nan, np.full(env.num_costs, np.nan))
    for _ in range(cfg.off_iterations):
        losses = pd_ddpg_iteration(nets, buffer.sample(cfg.minibatch, rng), gamma, env.limits)
    lam_off = nets.trace.average() if len(nets.trace) else nets.lam.copy()
    return OffPolicyResult(lam_off, nets.trace, nets, losses)


def explore_action(nets: PdDdpgNets, x: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Sample from the actor's softmax after Gaussian perturbation of its logits."""
    logits = nets.actor.forward(x)
    p = softmax(logits + sigma * rng.standard_normal(logits.shape))
    u = rng.random(len(p))
    return np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1), p.shape[1] - 1)
