"""Finite constrained MDPs, sampled experience, and exact evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PROB_TOL = 1e-12


class CmdpError(ValueError):
    """Raised when a CMDP model violates its invariants."""


@dataclass(frozen=True, eq=False)
class TabularCmdp:
    """A finite CMDP (S, A, P, R, C_1..C_m, d, gamma, p0).

    ``transition``, ``reward`` and each cost tensor are indexed ``[s, a, s']``.
    """

    transition: np.ndarray
    reward: np.ndarray
    costs: tuple[np.ndarray, ...]
    limits: np.ndarray
    gamma: float
    initial_dist: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise CmdpError(f"transition must have shape (S, A, S), got {P.shape}")
        R = np.asarray(self.reward, dtype=np.float64)
        costs = tuple(np.asarray(c, dtype=np.float64) for c in self.costs)
        limits = np.atleast_1d(np.asarray(self.limits, dtype=np.float64))
        p0 = np.asarray(self.initial_dist, dtype=np.float64)
        if R.shape != P.shape:
            raise CmdpError(f"reward shape {R.shape} != transition shape {P.shape}")
        for i, c in enumerate(costs):
            if c.shape != P.shape:
                raise CmdpError(f"cost {i} shape {c.shape} != transition shape {P.shape}")
        if len(limits) != len(costs):
            raise CmdpError(f"{len(costs)} cost tensors but {len(limits)} limits")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > PROB_TOL):
            raise CmdpError("transition rows must be probability distributions")
        if p0.shape != (P.shape[0],) or np.any(p0 < 0) or abs(p0.sum() - 1.0) > PROB_TOL:
            raise CmdpError("initial_dist must be a probability distribution over states")
        if not 0.0 <= self.gamma < 1.0:
            raise CmdpError(f"gamma must lie in [0, 1), got {self.gamma}")
        for arr in (P, R, p0, limits, *costs):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "limits", limits)
        object.__setattr__(self, "initial_dist", p0)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def num_costs(self) -> int:
        return len(self.costs)

    def expected_reward(self) -> np.ndarray:
        """r(s, a) = sum_s' P(s'|s,a) R(s,a,s')."""
        return np.einsum("ijk,ijk->ij", self.transition, self.reward)

    def expected_costs(self) -> np.ndarray:
        """Expected one-step costs, shape (m, S, A)."""
        return np.stack([np.einsum("ijk,ijk->ij", self.transition, c) for c in self.costs])

    def with_limits(self, limits) -> "TabularCmdp":
        return TabularCmdp(self.transition, self.reward, self.costs, limits, self.gamma, self.initial_dist)

    def to_json(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "costs": [c.tolist() for c in self.costs],
            "limits": self.limits.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TabularCmdp":
        cmdp = cls(
            transition=np.array(doc["transition"], dtype=np.float64),
            reward=np.array(doc["reward"], dtype=np.float64),
            costs=tuple(np.array(c, dtype=np.float64) for c in doc["costs"]),
            limits=np.array(doc["limits"], dtype=np.float64),
            gamma=float(doc["gamma"]),
            initial_dist=np.array(doc["initial_dist"], dtype=np.float64),
        )
        for key, actual in (("num_states", cmdp.num_states), ("num_actions", cmdp.num_actions)):
            if key in doc and int(doc[key]) != actual:
                raise CmdpError(f"{key}={doc[key]} does not match tensor shape ({actual})")
        return cmdp

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> "TabularCmdp":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Transition:
    state: object
    action: int
    reward: float
    cost: np.ndarray
    next_state: object
    terminal: bool = False


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One episode stored column-wise.

    ``terminal[t]`` marks a true termination at step t; an episode cut by the
    time limit ends with ``terminal[-1] == False`` and keeps its bootstrap.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray  # (T, m)
    next_states: np.ndarray
    terminals: np.ndarray
    policy_id: str = ""
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def num_costs(self) -> int:
        return self.costs.shape[1]

    def __iter__(self) -> Iterator[Transition]:
        for t in range(len(self)):
            yield Transition(
                state=self.states[t],
                action=int(self.actions[t]),
                reward=float(self.rewards[t]),
                cost=self.costs[t],
                next_state=self.next_states[t],
                terminal=bool(self.terminals[t]),
            )

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], m: int | None = None,
                         policy_id: str = "", seed: int | None = None) -> "Trajectory":
        if not transitions:
            m = 1 if m is None else m
            empty = np.zeros(0)
            return cls(empty, np.zeros(0, dtype=np.int64), empty, np.zeros((0, m)), empty,
                       np.zeros(0, dtype=bool), policy_id, seed)
        return cls(
            states=np.array([t.state for t in transitions]),
            actions=np.array([t.action for t in transitions], dtype=np.int64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            costs=np.array([np.atleast_1d(t.cost) for t in transitions], dtype=np.float64),
            next_states=np.array([t.next_state for t in transitions]),
            terminals=np.array([t.terminal for t in transitions], dtype=bool),
            policy_id=policy_id,
            seed=seed,
        )

    def is_chained(self) -> bool:
        for t in range(len(self) - 1):
            if self.terminals[t]:
                return False
            if not np.array_equal(self.next_states[t], self.states[t + 1]):
                return False
        return True


@dataclass
class DualState:
    """Lagrange multipliers and the sequence of values they have taken."""

    lam: np.ndarray
    history: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=np.float64)).copy()
        if np.any(self.lam < 0) or not np.all(np.isfinite(self.lam)):
            raise ValueError(f"multipliers must be finite and non-negative, got {self.lam}")

    @classmethod
    def zeros(cls, m: int) -> "DualState":
        return cls(np.zeros(m))

    def record(self, lam: np.ndarray) -> None:
        lam = np.asarray(lam, dtype=np.float64)
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError(f"multipliers must be finite and non-negative, got {lam}")
        self.lam = lam.copy()
        self.history.append(lam.copy())

    def overwrite(self, lam: np.ndarray) -> None:
        """Replace the result of the latest update (the one-time adjustment)."""
        lam = np.maximum(np.asarray(lam, dtype=np.float64), 0.0)
        self.lam = lam.copy()
        if self.history:
            self.history[-1] = lam.copy()
        else:
            self.history.append(lam.copy())


def discounted_sum(values, gamma: float) -> float:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(np.dot(gamma ** np.arange(len(values)), values))


def trajectory_return(traj: Trajectory, gamma: float) -> float:
    return discounted_sum(traj.rewards, gamma)


def trajectory_cost(traj: Trajectory, gamma: float) -> np.ndarray:
    if len(traj) == 0:
        return np.zeros(traj.costs.shape[1] if traj.costs.ndim == 2 else 1)
    weights = gamma ** np.arange(len(traj))
    return weights @ traj.costs


def truncation_horizon(gamma: float, max_abs: float, tol: float = 1e-3) -> int:
    """Smallest H with gamma**H * max_abs <= tol."""
    if max_abs <= tol or gamma == 0.0:
        return 1
    return max(1, math.ceil(math.log(tol / max_abs) / math.log(gamma)))


def policy_matrices(cmdp: TabularCmdp, policy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """State transition matrix and expected rewards/costs under ``policy[s, a]``."""
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (cmdp.num_states, cmdp.num_actions):
        raise ValueError(f"policy shape {policy.shape} does not match CMDP")
    if np.any(policy < -PROB_TOL) or np.any(np.abs(policy.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("policy rows must be distributions over actions")
    P_pi = np.einsum("sa,sat->st", policy, cmdp.transition)
    r_pi = np.einsum("sa,sa->s", policy, cmdp.expected_reward())
    c_pi = np.einsum("sa,msa->ms", policy, cmdp.expected_costs())
    return P_pi, r_pi, c_pi


def evaluate_policy_values(cmdp: TabularCmdp, policy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-state values (V_R, V_C) from V = r_pi + gamma P_pi V."""
    P_pi, r_pi, c_pi = policy_matrices(cmdp, policy)
    A = np.eye(cmdp.num_states) - cmdp.gamma * P_pi
    sol = np.linalg.solve(A, np.vstack([r_pi, c_pi]).T)
    return sol[:, 0], sol[:, 1:].T


def evaluate_policy_exact(cmdp: TabularCmdp, policy: np.ndarray) -> tuple[float, np.ndarray]:
    """Exact (R(pi), C(pi)) for a stochastic tabular policy."""
    v_r, v_c = evaluate_policy_values(cmdp, policy)
    p0 = cmdp.initial_dist
    return float(p0 @ v_r), v_c @ p0


def lagrangian_value(R: float, C, d, lam) -> float:
    C, d, lam = (np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in (C, d, lam))
    if not (C.shape == d.shape == lam.shape):
        raise ValueError(f"length mismatch: C{C.shape}, d{d.shape}, lambda{lam.shape}")
    if np.any(lam < 0):
        raise ValueError("lambda must be non-negative")
    return float(R - lam @ (C - d))
