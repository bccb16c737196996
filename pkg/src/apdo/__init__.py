"""Constrained RL with primal-dual policy optimization and an off-policy dual adjustment."""
from .cmdp import DualState, TabularCmdp, Trajectory, Transition
from .driver import ApdoConfig, PdDdpgRunConfig, PdoConfig, RunRecord, run_apdo, run_pdo, run_primal_dual_ddpg
from .envs import GridGatherEnv, GridGatherSpec, TabularEnv, make_env, make_risky_chain
from .offpolicy import OffPolicyConfig, ReplayBuffer, train_lambda_off
from .oracle import brute_force_enumerate, solve_dual_bisection, solve_lagrangian_mdp

__all__ = [
    "ApdoConfig", "DualState", "GridGatherEnv", "GridGatherSpec", "OffPolicyConfig", "PdDdpgRunConfig",
    "PdoConfig", "ReplayBuffer", "RunRecord", "TabularCmdp", "TabularEnv", "Trajectory", "Transition",
    "brute_force_enumerate", "make_env", "make_risky_chain", "run_apdo", "run_pdo", "run_primal_dual_ddpg",
    "solve_dual_bisection", "solve_lagrangian_mdp", "train_lambda_off",
]
