"""On-policy likelihood-ratio policy gradient on the Lagrangian with GAE."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .cmdp import TabularCmdp, Trajectory, evaluate_policy_values, lagrangian_value
from .envs import Env
from .nn import AdamState, Mlp, adam_step

GRAD_CLIP = 10.0


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class TabularSoftmaxPolicy:
    """pi(a|s) = softmax(theta[s])."""

    def __init__(self, num_states: int, num_actions: int, theta: np.ndarray | None = None):
        self.theta = np.zeros((num_states, num_actions)) if theta is None else np.array(theta, dtype=np.float64)
        self.num_actions = num_actions

    @property
    def params(self) -> np.ndarray:
        return self.theta.reshape(-1)

    def probs(self, obs) -> np.ndarray:
        return softmax(self.theta[np.asarray(obs, dtype=np.int64)])

    def table(self) -> np.ndarray:
        return softmax(self.theta)

    def score_gradient(self, obs, actions, weights) -> np.ndarray:
        """sum_i weights_i * grad_theta log pi(a_i | s_i), flattened."""
        obs = np.asarray(obs, dtype=np.int64)
        rows = -self.probs(obs)
        rows[np.arange(len(obs)), actions] += 1.0
        grad = np.zeros_like(self.theta)
        np.add.at(grad, obs, rows * np.asarray(weights)[:, None])
        return grad.reshape(-1)


class MlpSoftmaxPolicy:
    """Action logits from an Mlp over encoded observations (64, 32 tanh by default)."""

    def __init__(self, obs_dim: int, num_actions: int, rng: np.random.Generator,
                 hidden: Sequence[int] = (64, 32), encode: Callable | None = None):
        self.net = Mlp([obs_dim, *hidden, num_actions], rng)
        self.num_actions = num_actions
        self.encode = encode if encode is not None else (lambda o: np.asarray(o, dtype=np.float64))

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def probs(self, obs) -> np.ndarray:
        return softmax(self.net.forward(self.encode(obs)))

    def score_gradient(self, obs, actions, weights) -> np.ndarray:
        p = self.probs(obs)
        up = -p
        up[np.arange(len(p)), actions] += 1.0
        grad, _ = self.net.backward(up * np.asarray(weights)[:, None])
        return grad


def make_policy(env: Env, rng: np.random.Generator, kind: str = "auto", hidden=(64, 32)):
    if kind == "auto":
        kind = "tabular" if env.tabular else "mlp"
    if kind == "tabular":
        if not env.tabular:
            raise ValueError("tabular policy needs an environment with integer observations")
        return TabularSoftmaxPolicy(env.num_states, env.num_actions)
    if kind == "mlp":
        return MlpSoftmaxPolicy(env.obs_dim, env.num_actions, rng, hidden, encode=env.encode)
    raise ValueError(f"unknown policy kind {kind!r}")


@dataclass(frozen=True)
class GaeConfig:
    gae_lambda: float = 0.95
    gamma: float = 0.995

    def __post_init__(self):
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


class TabularBaseline:
    """Per-state value table moved toward the batch mean return-to-go."""

    def __init__(self, num_states: int, lr: float = 1.0):
        self.values = np.zeros(num_states)
        self.lr = lr

    def predict(self, obs) -> np.ndarray:
        return self.values[np.asarray(obs, dtype=np.int64)]

    def fit(self, obs, targets) -> None:
        obs = np.asarray(obs, dtype=np.int64)
        sums = np.bincount(obs, weights=targets, minlength=len(self.values))
        counts = np.bincount(obs, minlength=len(self.values))
        seen = counts > 0
        self.values[seen] += self.lr * (sums[seen] / counts[seen] - self.values[seen])


class MlpBaseline:
    """Small regression Mlp on encoded observations, fitted with Adam."""

    def __init__(self, obs_dim: int, rng: np.random.Generator, hidden=(32, 32), epochs: int = 5,
                 lr: float = 1e-2, minibatch: int = 256, encode: Callable | None = None):
        self.net = Mlp([obs_dim, *hidden, 1], rng)
        self.opt = AdamState.for_params(self.net.params, lr=lr)
        self.epochs = epochs
        self.minibatch = minibatch
        self.rng = rng
        self.encode = encode if encode is not None else (lambda o: np.asarray(o, dtype=np.float64))
        self.scale = 1.0

    def predict(self, obs) -> np.ndarray:
        return self.net.forward(self.encode(obs))[:, 0] * self.scale

    def fit(self, obs, targets) -> None:
        x = self.encode(obs)
        y = np.asarray(targets, dtype=np.float64)
        self.scale = max(self.scale, float(np.abs(y).max(initial=0.0)), 1e-8)
        y = y / self.scale
        n = len(y)
        for _ in range(self.epochs):
            order = self.rng.permutation(n)
            for start in range(0, n, self.minibatch):
                idx = order[start: start + self.minibatch]
                pred = self.net.forward(x[idx])[:, 0]
                grad, _ = self.net.backward(((pred - y[idx]) * (2.0 / len(idx)))[:, None])
                adam_step(self.net.params, grad, self.opt, locate=self.net.locate)


def make_baseline(env: Env, rng: np.random.Generator, kind: str = "auto"):
    if kind == "auto":
        kind = "tabular" if env.tabular else "mlp"
    if kind == "tabular":
        return TabularBaseline(env.num_states)
    return MlpBaseline(env.obs_dim, rng, encode=env.encode)


def sample_batch(env: Env, policy, batch_size: int, rng: np.random.Generator,
                 policy_id: str = "", seed: int | None = None,
                 env_rng: np.random.Generator | None = None) -> list[Trajectory]:
    """Roll out episodes under ``policy`` until exactly ``batch_size`` steps are collected.

    Episodes still running when the budget is spent are cut without a
    terminal flag, like a time limit. Actions are drawn from ``rng``; resets
    and transitions from ``env_rng`` (defaults to ``rng``).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    env_rng = rng if env_rng is None else env_rng
    trajectories: list[Trajectory] = []
    total = 0
    while total < batch_size:
        n = math.ceil((batch_size - total) / env.max_steps)
        states = env.reset_batch(n, env_rng)
        obs = env.observe(states)
        active = np.ones(n, dtype=bool)
        cols = {k: [] for k in ("obs", "act", "rew", "cost", "next", "term", "alive")}
        for _ in range(env.max_steps):
            idx = np.flatnonzero(active)
            room = batch_size - total
            if idx.size > room:
                active[idx[room:]] = False
                idx = idx[:room]
            if idx.size == 0:
                break
            total += idx.size
            cur_states = [states[i] for i in idx] if isinstance(states, list) else states[idx]
            p = policy.probs(obs[idx])
            u = rng.random(len(idx))
            actions = np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1), env.num_actions - 1)
            nxt, rew, cost, term = env.step_batch(cur_states, actions, env_rng)
            nxt_obs = env.observe(nxt)
            full_obs = np.zeros((n, *obs.shape[1:]), dtype=obs.dtype)
            full_obs[idx] = obs[idx]
            step = dict(obs=full_obs, act=np.zeros(n, dtype=np.int64), rew=np.zeros(n),
                        cost=np.zeros((n, env.num_costs)), next=np.zeros_like(full_obs),
                        term=np.zeros(n, dtype=bool), alive=active.copy())
            step["act"][idx] = actions
            step["rew"][idx] = rew
            step["cost"][idx] = cost
            step["next"][idx] = nxt_obs
            step["term"][idx] = term
            for k, v in step.items():
                cols[k].append(v)
            if isinstance(states, list):
                for j, i in enumerate(idx):
                    states[i] = nxt[j]
            else:
                states = states.copy()
                states[idx] = nxt
            obs = obs.copy()
            obs[idx] = nxt_obs
            active[idx] = ~np.asarray(term, dtype=bool)
        stacked = {k: np.stack(v, axis=1) for k, v in cols.items()}
        for i in range(n):
            alive = stacked["alive"][i]
            if not alive.any():
                continue
            trajectories.append(Trajectory(
                states=stacked["obs"][i][alive],
                actions=stacked["act"][i][alive],
                rewards=stacked["rew"][i][alive],
                costs=stacked["cost"][i][alive],
                next_states=stacked["next"][i][alive],
                terminals=stacked["term"][i][alive],
                policy_id=policy_id,
                seed=seed,
            ))
    return trajectories


def is_complete(traj: Trajectory, max_steps: int) -> bool:
    """True unless the episode was cut short by the sampling budget."""
    return len(traj) > 0 and (bool(traj.terminals[-1]) or len(traj) >= max_steps)


def gae_from_signal(signal, values, bootstrap: float, gamma: float, lam: float) -> np.ndarray:
    """A_t = sum_l (gamma lam)^l delta_{t+l}, delta_t = x_t + gamma V_{t+1} - V_t."""
    signal = np.asarray(signal, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    nxt = np.append(values[1:], bootstrap)
    delta = signal + gamma * nxt - values
    adv = np.empty_like(delta)
    acc = 0.0
    decay = gamma * lam
    for t in range(len(delta) - 1, -1, -1):
        acc = delta[t] + decay * acc
        adv[t] = acc
    return adv


def _predict(baseline, obs) -> np.ndarray:
    return baseline.predict(obs) if hasattr(baseline, "predict") else np.asarray(baseline(obs), dtype=np.float64)


def gae_advantages(traj: Trajectory, baseline, cfg: GaeConfig, channel: int | None = None) -> np.ndarray:
    """GAE for the reward (``channel=None``) or cost channel ``channel``.

    ``baseline`` is an object with ``predict`` or a callable on observations.
    Terminal episodes bootstrap with V = 0, time-limited ones with V(s_T).
    """
    if len(traj) == 0:
        return np.zeros(0)
    signal = traj.rewards if channel is None else traj.costs[:, channel]
    values = _predict(baseline, traj.states)
    bootstrap = 0.0 if traj.terminals[-1] else float(_predict(baseline, traj.next_states[-1:])[0])
    return gae_from_signal(signal, values, bootstrap, cfg.gamma, cfg.gae_lambda)


def discounted_to_go(x, gamma: float) -> np.ndarray:
    out = np.empty(len(x))
    acc = 0.0
    for t in range(len(x) - 1, -1, -1):
        acc = x[t] + gamma * acc
        out[t] = acc
    return out


@dataclass
class GradientInfo:
    advantages: np.ndarray
    reward_advantages: np.ndarray
    cost_advantages: np.ndarray  # (N, m)
    grad_norm: float


def lagrangian_policy_gradient(batch: Sequence[Trajectory], policy, baseline_r, baselines_c, lam,
                               cfg: GaeConfig, normalize: bool = True) -> tuple[np.ndarray, GradientInfo]:
    """REINFORCE estimate of grad_theta L(pi_theta, lam) with GAE advantages.

    The Lagrangian advantage A^R - sum_i lam_i A^{C_i} is formed first and,
    when ``normalize`` is set, standardized over the batch.
    """
    if not batch:
        raise ValueError("empty batch")
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if np.any(lam < 0):
        raise ValueError("lambda must be non-negative")
    adv_r = np.concatenate([gae_advantages(t, baseline_r, cfg) for t in batch])
    adv_c = np.stack([np.concatenate([gae_advantages(t, b, cfg, channel=i) for t in batch])
                      for i, b in enumerate(baselines_c)], axis=1)
    adv = adv_r - adv_c @ lam
    if normalize and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    obs = np.concatenate([t.states for t in batch])
    actions = np.concatenate([t.actions for t in batch])
    grad = policy.score_gradient(obs, actions, adv / len(adv))
    return grad, GradientInfo(adv, adv_r, adv_c, float(np.linalg.norm(grad)))


def value_targets(traj: Trajectory, signal, baseline, gamma: float) -> np.ndarray:
    """Discounted signal-to-go; a non-terminal end is bootstrapped with the baseline."""
    out = discounted_to_go(signal, gamma)
    if len(traj) and not traj.terminals[-1]:
        tail = float(_predict(baseline, traj.next_states[-1:])[0])
        out += gamma ** (len(traj) - np.arange(len(traj))) * tail
    return out


def fit_baselines(batch: Sequence[Trajectory], gamma: float, baseline_r, baselines_c) -> None:
    obs = np.concatenate([t.states for t in batch])
    y_r = np.concatenate([value_targets(t, t.rewards, baseline_r, gamma) for t in batch])
    y_c = [np.concatenate([value_targets(t, t.costs[:, i], b, gamma) for t in batch])
           for i, b in enumerate(baselines_c)]
    baseline_r.fit(obs, y_r)
    for b, y in zip(baselines_c, y_c):
        b.fit(obs, y)


def clip_by_norm(grad: np.ndarray, max_norm: float = GRAD_CLIP) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def policy_update(policy, grad: np.ndarray, alpha: float, max_norm: float = GRAD_CLIP) -> None:
    """theta <- theta + alpha * clip(grad), in place."""
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite policy gradient")
    policy.params[...] += alpha * clip_by_norm(grad, max_norm)
    if not np.all(np.isfinite(policy.params)):
        raise FloatingPointError("non-finite policy parameters after update")


def exact_lagrangian_gradient(cmdp: TabularCmdp, theta: np.ndarray, lam) -> np.ndarray:
    """Exact grad_theta L for a tabular softmax policy (policy gradient theorem)."""
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    pi = softmax(np.asarray(theta, dtype=np.float64))
    v_r, v_c = evaluate_policy_values(cmdp, pi)
    v = v_r - lam @ v_c
    r = cmdp.expected_reward() - np.einsum("m,msa->sa", lam, cmdp.expected_costs())
    q = r + cmdp.gamma * np.einsum("sat,t->sa", cmdp.transition, v)
    P_pi = np.einsum("sa,sat->st", pi, cmdp.transition)
    visits = np.linalg.solve((np.eye(cmdp.num_states) - cmdp.gamma * P_pi).T, cmdp.initial_dist)
    return visits[:, None] * pi * (q - v[:, None])


def lagrangian_of(cmdp: TabularCmdp, pi: np.ndarray, lam) -> float:
    v_r, v_c = evaluate_policy_values(cmdp, pi)
    return lagrangian_value(cmdp.initial_dist @ v_r, v_c @ cmdp.initial_dist, cmdp.limits, lam)
