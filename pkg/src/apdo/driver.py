"""Outer primal-dual loops: PDO, APDO and a standalone primal-dual DDPG agent."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .cmdp import DualState, Trajectory, trajectory_cost, trajectory_return
from .envs import Env
from .offpolicy import (OffPolicyConfig, PdDdpgNets, ReplayBuffer, explore_action, pd_ddpg_iteration,
                        train_lambda_off)
from .onpolicy import (GaeConfig, fit_baselines, is_complete, lagrangian_policy_gradient, make_baseline,
                       make_policy, policy_update, sample_batch)

STREAMS = ("env", "policy_init", "sampling", "buffer", "offpolicy", "baseline")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per component, derived from one master seed."""
    return {name: np.random.default_rng(np.random.SeedSequence([int(seed), i]))
            for i, name in enumerate(STREAMS)}


@dataclass(frozen=True)
class PdoConfig:
    alpha: float = 0.1
    beta: float = 0.1
    epochs: int = 100
    batch_size: int = 3000
    gamma: float = 0.995
    gae_lambda: float = 0.95
    normalize_advantages: bool = True
    policy: str = "auto"
    policy_hidden: tuple = (64, 32)
    lambda_init: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.gae_lambda <= 1.0 or not 0.0 < self.gamma <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1] and gamma in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_init < 0:
            raise ValueError("lambda_init must be >= 0")


@dataclass(frozen=True)
class ApdoConfig(PdoConfig):
    k_adj: int = 5
    offpolicy: OffPolicyConfig = field(default_factory=OffPolicyConfig)

    def __post_init__(self):
        super().__post_init__()
        if self.k_adj < 0:
            raise ValueError("k_adj must be >= 0")


@dataclass
class RunRecord:
    """One learning-curve row; ``lam`` is the multiplier after this epoch's dual update."""

    epoch: int
    avg_return: float
    avg_cost: np.ndarray
    lam: np.ndarray
    samples: int
    wall_s: float
    adjusted: bool = False
    lambda_off: np.ndarray | None = None


def estimate_constraint_gap(batch, gamma: float, d) -> np.ndarray:
    """Mean discounted trajectory cost minus the limit, per constraint."""
    if not batch:
        raise ValueError("empty batch")
    costs = np.mean([trajectory_cost(t, gamma) for t in batch], axis=0)
    return costs - np.atleast_1d(np.asarray(d, dtype=np.float64))


def dual_ascent_step(dual: DualState, gap, beta: float) -> DualState:
    """lam_i <- [lam_i + beta * gap_i]^+ ."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    dual.record(np.maximum(dual.lam + beta * np.asarray(gap, dtype=np.float64), 0.0))
    return dual


def _averages(batch, gamma, max_steps):
    # budget-cut episodes would bias the discounted totals downward
    batch = [t for t in batch if is_complete(t, max_steps)] or batch
    ret = float(np.mean([trajectory_return(t, gamma) for t in batch]))
    cost = np.mean([trajectory_cost(t, gamma) for t in batch], axis=0)
    return ret, cost


def _check_finite(rec: RunRecord) -> None:
    vals = np.concatenate([[rec.avg_return], rec.avg_cost, rec.lam])
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError(f"non-finite metric at epoch {rec.epoch}")


def _primal_dual(env: Env, cfg: PdoConfig, seed: int, adjust: bool, on_epoch=None) -> list[RunRecord]:
    rngs = rng_streams(seed)
    policy = make_policy(env, rngs["policy_init"], cfg.policy, cfg.policy_hidden)
    base_r = make_baseline(env, rngs["baseline"])
    base_c = [make_baseline(env, rngs["baseline"]) for _ in range(env.num_costs)]
    gae = GaeConfig(cfg.gae_lambda, cfg.gamma)
    dual = DualState(np.full(env.num_costs, cfg.lambda_init))
    buffer = ReplayBuffer(cfg.offpolicy.buffer_capacity) if adjust else None
    records: list[RunRecord] = []
    samples = 0
    start = time.perf_counter()
    for k in range(cfg.epochs):
        batch = sample_batch(env, policy, cfg.batch_size, rngs["sampling"], policy_id=f"pi_{k}", seed=seed,
                             env_rng=rngs["env"])
        samples += sum(len(t) for t in batch)
        if buffer is not None:
            for traj in batch:
                buffer.extend(traj)
        avg_return, avg_cost = _averages(batch, cfg.gamma, env.max_steps)
        gap = avg_cost - env.limits
        lam_k = dual.lam.copy()
        grad, _ = lagrangian_policy_gradient(batch, policy, base_r, base_c, lam_k, gae,
                                             normalize=cfg.normalize_advantages)
        fit_baselines(batch, cfg.gamma, base_r, base_c)
        policy_update(policy, grad, cfg.alpha)
        dual_ascent_step(dual, gap, cfg.beta)
        adjusted, lam_off = False, None
        if adjust and k == cfg.k_adj:
            result = train_lambda_off(buffer, env, cfg.offpolicy, rngs["offpolicy"], cfg.gamma, lam0=dual.lam)
            lam_off = result.lambda_off
            dual.overwrite(lam_off)
            adjusted = True
        rec = RunRecord(k, avg_return, avg_cost, dual.lam.copy(), samples, time.perf_counter() - start,
                        adjusted, lam_off)
        _check_finite(rec)
        records.append(rec)
        if on_epoch is not None:
            on_epoch(rec, policy)
    return records


def run_pdo(env: Env, cfg: PdoConfig, seed: int, on_epoch=None) -> list[RunRecord]:
    """Primal-dual optimization: policy gradient at fixed lambda, then projected dual ascent."""
    return _primal_dual(env, cfg, seed, adjust=False, on_epoch=on_epoch)


def run_apdo(env: Env, cfg: ApdoConfig, seed: int, on_epoch=None) -> list[RunRecord]:
    """PDO plus replay storage and a one-time overwrite lam <- lam_off at epoch k_adj."""
    return _primal_dual(env, cfg, seed, adjust=True, on_epoch=on_epoch)


@dataclass(frozen=True)
class PdDdpgRunConfig:
    epochs: int = 20
    steps_per_epoch: int = 1000
    gamma: float = 0.995
    warmup: int = 64
    offpolicy: OffPolicyConfig = field(default_factory=OffPolicyConfig)


def run_primal_dual_ddpg(env: Env, cfg: PdDdpgRunConfig, seed: int) -> list[RunRecord]:
    """Standalone primal-dual DDPG with exploration; one update per environment step.

    Each record summarizes ``steps_per_epoch`` environment steps: returns and
    costs of episodes finished in that window under the exploring policy.
    """
    rngs = rng_streams(seed)
    off = cfg.offpolicy
    nets = PdDdpgNets(env.obs_dim, env.num_actions, env.num_costs, off, rngs["policy_init"], encode=env.encode)
    buffer = ReplayBuffer(off.buffer_capacity)
    records: list[RunRecord] = []
    samples = 0
    start = time.perf_counter()
    state = env.reset_batch(1, rngs["env"])
    ep_rewards, ep_costs = [], []
    finished: list[tuple[float, np.ndarray]] = []
    for k in range(cfg.epochs):
        finished.clear()
        for _ in range(cfg.steps_per_epoch):
            obs = env.observe(state)
            action = explore_action(nets, env.encode(obs), off.explore_sigma, rngs["sampling"])
            nxt, rew, cost, term = env.step_batch(state, action, rngs["env"])
            nxt_obs = env.observe(nxt)
            ep_rewards.append(float(rew[0]))
            ep_costs.append(np.asarray(cost[0], dtype=np.float64))
            traj = Trajectory(obs, action, np.asarray(rew, dtype=np.float64), np.asarray(cost, dtype=np.float64),
                              nxt_obs, np.asarray(term, dtype=bool))
            buffer.extend(traj)
            samples += 1
            if len(buffer) >= cfg.warmup:
                pd_ddpg_iteration(nets, buffer.sample(off.minibatch, rngs["buffer"]), cfg.gamma, env.limits)
            state = nxt
            if bool(term[0]) or len(ep_rewards) >= env.max_steps:
                g = cfg.gamma ** np.arange(len(ep_rewards))
                finished.append((float(g @ np.array(ep_rewards)), g @ np.array(ep_costs)))
                ep_rewards, ep_costs = [], []
                state = env.reset_batch(1, rngs["env"])
        if finished:
            avg_return = float(np.mean([f[0] for f in finished]))
            avg_cost = np.mean([f[1] for f in finished], axis=0)
        else:
            avg_return, avg_cost = 0.0, np.zeros(env.num_costs)
        rec = RunRecord(k, avg_return, avg_cost, nets.lam.copy(), samples, time.perf_counter() - start)
        _check_finite(rec)
        records.append(rec)
    return records


def first_epoch_within(records: list[RunRecord], target: float, tol: float) -> int | None:
    """First epoch index whose post-update multiplier is within ``tol`` of ``target``."""
    for rec in records:
        if abs(float(rec.lam[0]) - target) <= tol:
            return rec.epoch
    return None


__all__ = [
    "ApdoConfig", "PdDdpgRunConfig", "PdoConfig", "RunRecord", "dual_ascent_step", "estimate_constraint_gap",
    "first_epoch_within", "rng_streams", "run_apdo", "run_pdo", "run_primal_dual_ddpg",
]
