"""Exact solutions of small finite CMDPs.

Two independent routes are provided for a single constraint:

* ``solve_dual_bisection`` minimizes the piecewise-linear dual function
  g(lam) = max_pi L(pi, lam) by bisecting on its subgradient C(pi_lam) - d.
* ``brute_force_enumerate`` evaluates every deterministic stationary policy
  and takes the best feasible mixture of two of them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import TabularCmdp, evaluate_policy_exact, evaluate_policy_values, lagrangian_value

BELLMAN_TOL = 1e-10
TIE_TOL = 1e-9
FEAS_TOL = 1e-9
MAX_ENUMERATION = 10 ** 6


class InfeasibleError(RuntimeError):
    pass


class TooLargeError(ValueError):
    pass


@dataclass
class LagrangianSolution:
    policy: np.ndarray  # deterministic, one-hot rows
    R: float
    C: np.ndarray
    L: float
    residual: float


@dataclass
class DualSolution:
    lambda_star: float
    policy: np.ndarray  # stationary stochastic policy realizing the mixture
    R_star: float
    C_star: float
    weight: float = 1.0  # probability of following policy_low in the mixture
    policy_low: np.ndarray | None = None  # C > d side of the breakpoint
    policy_high: np.ndarray | None = None  # C <= d side
    bracket: tuple[float, float] = (0.0, 0.0)
    iterates: list[tuple[float, float]] | None = None  # (lambda, C(pi_lambda)) visited


def _q_values(cmdp: TabularCmdp, r: np.ndarray, v: np.ndarray) -> np.ndarray:
    return r + cmdp.gamma * np.einsum("sat,t->sa", cmdp.transition, v)


def greedy(q: np.ndarray) -> np.ndarray:
    """Argmax per row, ties (within TIE_TOL) broken toward the lowest action index."""
    best = q.max(axis=1, keepdims=True)
    choice = np.argmax(q >= best - TIE_TOL * np.maximum(1.0, np.abs(best)), axis=1)
    return np.eye(q.shape[1])[choice]


def solve_lagrangian_mdp(cmdp: TabularCmdp, lam) -> LagrangianSolution:
    """Optimal deterministic policy for the scalarized reward r - sum_i lam_i c_i.

    Solved by policy iteration with exact linear solves; the returned policy is
    greedy (lowest-index ties) with respect to the final values, whose Bellman
    residual is reported and checked against BELLMAN_TOL.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=np.float64))
    if lam.shape != (cmdp.num_costs,) or np.any(lam < 0):
        raise ValueError(f"lambda must be a non-negative vector of length {cmdp.num_costs}")
    r = cmdp.expected_reward() - np.einsum("m,msa->sa", lam, cmdp.expected_costs())
    S = cmdp.num_states
    policy = np.eye(cmdp.num_actions)[np.zeros(S, dtype=np.int64)]
    idx = np.arange(S)
    for _ in range(10_000):
        P_pi = np.einsum("sa,sat->st", policy, cmdp.transition)
        v = np.linalg.solve(np.eye(S) - cmdp.gamma * P_pi, (policy * r).sum(axis=1))
        q = _q_values(cmdp, r, v)
        current = policy.argmax(axis=1)
        improve = q.max(axis=1) > q[idx, current] + TIE_TOL * np.maximum(1.0, np.abs(v))
        if not improve.any():
            break
        new = current.copy()
        new[improve] = q[improve].argmax(axis=1)
        policy = np.eye(cmdp.num_actions)[new]
    residual = float(np.max(np.abs(q.max(axis=1) - v)))
    if residual > BELLMAN_TOL * max(1.0, float(np.max(np.abs(v)))):
        raise RuntimeError(f"policy iteration stopped with Bellman residual {residual:.3e}")
    policy = greedy(q)
    R, C = evaluate_policy_exact(cmdp, policy)
    return LagrangianSolution(policy, R, C, lagrangian_value(R, C, cmdp.limits, lam), residual)


def dual_function(cmdp: TabularCmdp, lam) -> float:
    """g(lam) = max_pi L(pi, lam)."""
    return solve_lagrangian_mdp(cmdp, lam).L


def occupancy(cmdp: TabularCmdp, policy: np.ndarray) -> np.ndarray:
    """Normalized discounted state-action occupancy rho(s, a)."""
    P_pi = np.einsum("sa,sat->st", policy, cmdp.transition)
    d_s = np.linalg.solve((np.eye(cmdp.num_states) - cmdp.gamma * P_pi).T, cmdp.initial_dist)
    return (1.0 - cmdp.gamma) * d_s[:, None] * policy


def mix_policies(cmdp: TabularCmdp, pi_a: np.ndarray, pi_b: np.ndarray, weight: float) -> np.ndarray:
    """Stationary policy whose occupancy is weight*rho_a + (1-weight)*rho_b.

    Its discounted reward and costs are the same convex combination of those
    of ``pi_a`` and ``pi_b``. States unreachable under both fall back to pi_b.
    """
    rho = weight * occupancy(cmdp, pi_a) + (1.0 - weight) * occupancy(cmdp, pi_b)
    mass = rho.sum(axis=1, keepdims=True)
    out = np.array(pi_b, dtype=np.float64)
    reach = mass[:, 0] > 1e-300
    out[reach] = rho[reach] / mass[reach]
    return out


def _require_single(cmdp: TabularCmdp) -> float:
    if cmdp.num_costs != 1:
        raise ValueError("the exact dual oracle handles a single constraint only")
    return float(cmdp.limits[0])


def solve_dual_bisection(cmdp: TabularCmdp, width: float = 1e-4, max_doublings: int = 20) -> DualSolution:
    d = _require_single(cmdp)
    iterates = []
    bound = d + FEAS_TOL * max(1.0, abs(d))

    def solve(lam: float) -> LagrangianSolution:
        sol = solve_lagrangian_mdp(cmdp, [lam])
        iterates.append((lam, float(sol.C[0])))
        return sol

    sol0 = solve(0.0)
    if sol0.C[0] <= bound:
        return DualSolution(0.0, sol0.policy, sol0.R, float(sol0.C[0]), 1.0, sol0.policy, sol0.policy,
                            (0.0, 0.0), iterates)

    lo, sol_lo = 0.0, sol0
    hi, sol_hi = 1.0, solve(1.0)
    doublings = 0
    while sol_hi.C[0] > bound:
        if doublings >= max_doublings:
            raise InfeasibleError(f"C(pi_lambda) > d for every lambda up to {hi:g}")
        lo, sol_lo = hi, sol_hi
        hi *= 2.0
        sol_hi = solve(hi)
        doublings += 1

    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        sol_mid = solve(mid)
        if sol_mid.C[0] > bound:
            lo, sol_lo = mid, sol_mid
        else:
            hi, sol_hi = mid, sol_mid

    # The dual minimizer is the breakpoint where the Lagrangian lines of the two
    # bracketing policies cross; refine until no third policy beats them there.
    for _ in range(1000):
        c_lo, c_hi = float(sol_lo.C[0]), float(sol_hi.C[0])
        lam_x = (sol_lo.R - sol_hi.R) / (c_lo - c_hi)
        lam_x = min(max(lam_x, lo), hi)
        line = sol_lo.R - lam_x * (c_lo - d)
        sol_x = solve(lam_x)
        if sol_x.L <= line + 1e-9 * max(1.0, abs(line)):
            break
        if sol_x.C[0] > bound:
            lo, sol_lo = lam_x, sol_x
        else:
            hi, sol_hi = lam_x, sol_x
    c_lo, c_hi = float(sol_lo.C[0]), float(sol_hi.C[0])
    weight = min(max((d - c_hi) / (c_lo - c_hi), 0.0), 1.0)
    policy = mix_policies(cmdp, sol_lo.policy, sol_hi.policy, weight)
    R_star = weight * sol_lo.R + (1.0 - weight) * sol_hi.R
    return DualSolution(float(lam_x), policy, float(R_star), weight * c_lo + (1.0 - weight) * c_hi,
                        float(weight), sol_lo.policy, sol_hi.policy, (lo, hi), iterates)


def enumerate_deterministic(cmdp: TabularCmdp, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(actions[N, S], R[N], C[N, m]) for every deterministic stationary policy."""
    S, A = cmdp.num_states, cmdp.num_actions
    if A ** S > MAX_ENUMERATION:
        raise TooLargeError(f"{A}^{S} deterministic policies exceeds {MAX_ENUMERATION}")
    N = A ** S
    codes = np.arange(N)
    actions = np.stack([(codes // A ** s) % A for s in range(S)], axis=1)
    r_sa = cmdp.expected_reward()
    c_sa = cmdp.expected_costs()
    Rs = np.empty(N)
    Cs = np.empty((N, cmdp.num_costs))
    eye = np.eye(S)
    sidx = np.arange(S)
    for start in range(0, N, chunk):
        acts = actions[start: start + chunk]
        P_pi = cmdp.transition[sidx, acts]  # (n, S, S)
        rhs = np.concatenate([r_sa[sidx, acts][..., None], np.moveaxis(c_sa[:, sidx, acts], 0, -1)], axis=-1)
        values = np.linalg.solve(eye - cmdp.gamma * P_pi, rhs)  # (n, S, 1+m)
        avg = np.einsum("s,nsk->nk", cmdp.initial_dist, values)
        Rs[start: start + chunk] = avg[:, 0]
        Cs[start: start + chunk] = avg[:, 1:]
    return actions, Rs, Cs


def brute_force_enumerate(cmdp: TabularCmdp) -> tuple[float | None, np.ndarray]:
    """Best feasible value over mixtures of two deterministic policies.

    Returns (best value or None when nothing is feasible, frontier) where the
    frontier holds the (C, R) points of non-dominated deterministic policies,
    sorted by cost.
    """
    d = _require_single(cmdp)
    _, Rs, Cs = enumerate_deterministic(cmdp)
    C = Cs[:, 0]
    order = np.lexsort((-Rs, C))
    frontier, best_r = [], -np.inf
    for i in order:
        if Rs[i] > best_r + 1e-12:
            frontier.append((C[i], Rs[i]))
            best_r = Rs[i]
    frontier = np.array(frontier)

    below = C <= d + FEAS_TOL * max(1.0, abs(d))
    if not below.any():
        return None, frontier
    best = float(Rs[below].max())
    above = np.flatnonzero(~below)
    cb, rb = C[below], Rs[below]
    for start in range(0, len(above), 1024):
        ia = above[start: start + 1024]
        ca, ra = C[ia][:, None], Rs[ia][:, None]
        w = (d - cb[None, :]) / (ca - cb[None, :])  # weight on the infeasible member
        vals = rb[None, :] + w * (ra - rb[None, :])
        best = max(best, float(vals.max()))
    return best, frontier


def random_cmdp(seed, num_states: int = 3, num_actions: int = 2, gamma: float = 0.9,
                slack: tuple[float, float] = (0.1, 0.9)) -> TabularCmdp:
    """Random single-constraint CMDP with a strictly feasible limit.

    The limit is placed between the minimum achievable cost and the cost of
    the unconstrained reward-optimal policy.
    """
    rng = np.random.default_rng(seed)
    S, A = num_states, num_actions
    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.uniform(0.0, 1.0, size=(S, A, S))
    Cst = rng.uniform(0.0, 1.0, size=(S, A, S))
    p0 = rng.dirichlet(np.ones(S))
    base = TabularCmdp(P, R, (Cst,), np.array([0.0]), gamma, p0)
    c_max = float(solve_lagrangian_mdp(base, [0.0]).C[0])
    neg = TabularCmdp(P, -Cst, (Cst,), np.array([0.0]), gamma, p0)
    c_min = float(solve_lagrangian_mdp(neg, [0.0]).C[0])
    u = rng.uniform(*slack)
    d = c_min + u * (c_max - c_min)
    if c_max - c_min < 1e-9:
        d = c_max + 0.1
    return base.with_limits(np.array([d]))


__all__ = [
    "DualSolution", "InfeasibleError", "LagrangianSolution", "TooLargeError", "brute_force_enumerate",
    "dual_function", "enumerate_deterministic", "evaluate_policy_values", "greedy", "mix_policies",
    "occupancy", "random_cmdp", "solve_dual_bisection", "solve_lagrangian_mdp",
]
