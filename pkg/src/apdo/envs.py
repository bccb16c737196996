"""Experiment environments: GridGather (discrete gather task) and tabular CMDPs.

Every environment exposes the same batched interface used by the samplers:
``reset_batch``, ``step_batch``, ``observe`` and ``encode``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .cmdp import TabularCmdp, truncation_horizon

UP, DOWN, LEFT, RIGHT = range(4)
MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}
MAX_TABULAR_STATES = 20_000


class EnvError(ValueError):
    pass


@dataclass(frozen=True)
class GridGatherSpec:
    grid_size: int = 5
    num_apples: int = 2
    num_bombs: int = 8
    apple_reward: float = 10.0
    bomb_cost: float = 1.0
    cost_limit: float = 0.2
    episode_length: int = 15
    layout_seed: int | None = None  # None: new item layout every episode

    def __post_init__(self):
        if self.grid_size < 1:
            raise EnvError("grid_size must be >= 1")
        if self.num_apples < 0 or self.num_bombs < 0:
            raise EnvError("item counts must be non-negative")
        if self.num_apples + self.num_bombs > self.grid_size ** 2 - 1:
            raise EnvError("num_apples + num_bombs must leave at least one free cell")
        if self.episode_length < 1:
            raise EnvError("episode_length must be >= 1")

    @property
    def num_cells(self) -> int:
        return self.grid_size ** 2

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "GridGatherSpec":
        return cls(**doc)


@dataclass(frozen=True)
class EnvState:
    agent: int
    apples: frozenset
    bombs: frozenset
    step: int = 0


def _layout(spec: GridGatherSpec, rng: np.random.Generator) -> tuple[frozenset, frozenset]:
    cells = rng.permutation(spec.num_cells)
    apples = frozenset(int(c) for c in cells[: spec.num_apples])
    bombs = frozenset(int(c) for c in cells[spec.num_apples: spec.num_apples + spec.num_bombs])
    return apples, bombs


def fixed_layout(spec: GridGatherSpec) -> tuple[frozenset, frozenset]:
    if spec.layout_seed is None:
        raise EnvError("GridGatherSpec has no fixed layout (layout_seed is None)")
    return _layout(spec, np.random.default_rng(spec.layout_seed))


def env_reset(spec: GridGatherSpec, seed) -> EnvState:
    """Place items (fixed or random layout) and the agent on a random free cell."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if spec.layout_seed is None:
        apples, bombs = _layout(spec, rng)
    else:
        apples, bombs = fixed_layout(spec)
    free = [c for c in range(spec.num_cells) if c not in apples and c not in bombs]
    agent = int(free[rng.integers(len(free))])
    return EnvState(agent, apples, bombs, 0)


def is_done(spec: GridGatherSpec, state: EnvState) -> bool:
    if state.step >= spec.episode_length:
        return True
    return spec.num_apples > 0 and not state.apples


def move(spec: GridGatherSpec, cell: int, action: int) -> int:
    if action not in MOVES:
        raise EnvError(f"unknown action {action}")
    n = spec.grid_size
    r, c = divmod(cell, n)
    dr, dc = MOVES[action]
    r = min(max(r + dr, 0), n - 1)
    c = min(max(c + dc, 0), n - 1)
    return r * n + c


def env_step(spec: GridGatherSpec, state: EnvState, action: int) -> tuple[EnvState, float, float, bool]:
    if is_done(spec, state):
        raise EnvError("cannot step a finished episode")
    cell = move(spec, state.agent, action)
    reward = cost = 0.0
    apples, bombs = state.apples, state.bombs
    if cell in apples:
        reward = spec.apple_reward
        apples = apples - {cell}
    if cell in bombs:
        cost = spec.bomb_cost
        bombs = bombs - {cell}
    nxt = EnvState(cell, apples, bombs, state.step + 1)
    return nxt, reward, cost, is_done(spec, nxt)


class Env:
    """Batched environment interface shared by the on- and off-policy learners."""

    num_actions: int
    num_costs: int
    limits: np.ndarray
    max_steps: int
    obs_dim: int
    num_states: int | None = None  # set for tabular observations

    @property
    def tabular(self) -> bool:
        return self.num_states is not None

    def reset_batch(self, n, rng):
        raise NotImplementedError

    def step_batch(self, states, actions, rng):
        """Returns (next_states, rewards, costs[n, m], terminals)."""
        raise NotImplementedError

    def observe(self, states) -> np.ndarray:
        raise NotImplementedError

    def encode(self, obs) -> np.ndarray:
        """Float feature matrix for observations (one-hot for tabular ones)."""
        obs = np.asarray(obs)
        if self.tabular:
            eye = getattr(self, "_eye", None)
            if eye is None:
                eye = self._eye = np.eye(self.num_states)
            return eye[obs.astype(np.int64)]
        return obs.astype(np.float64)


def _sample_rows(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    idx = (u[:, None] > cdf).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1)


class TabularEnv(Env):
    """Simulator for a TabularCmdp; episodes are cut at ``horizon`` steps.

    The default horizon is chosen so that gamma**H * max|R, C| <= 1e-3.
    Entering a state listed in ``terminal_states`` ends the episode.
    """

    def __init__(self, cmdp: TabularCmdp, horizon: int | None = None, terminal_states=None):
        self.cmdp = cmdp
        self.num_actions = cmdp.num_actions
        self.num_costs = cmdp.num_costs
        self.num_states = cmdp.num_states
        self.obs_dim = cmdp.num_states
        self.limits = cmdp.limits
        if horizon is None:
            scale = max(np.abs(cmdp.reward).max(), *(np.abs(c).max() for c in cmdp.costs))
            horizon = truncation_horizon(cmdp.gamma, scale)
        self.max_steps = int(horizon)
        self.terminal = np.zeros(cmdp.num_states, dtype=bool)
        if terminal_states is not None:
            self.terminal[np.asarray(terminal_states)] = True
        self._p0_cdf = np.cumsum(cmdp.initial_dist)
        self._p_cdf = np.cumsum(cmdp.transition, axis=2)
        self._cost_stack = np.stack(cmdp.costs, axis=-1)  # (S, A, S, m)

    def reset_batch(self, n, rng):
        u = rng.random(n)
        return np.minimum(np.searchsorted(self._p0_cdf, u, side="right"), self.num_states - 1)

    def step_batch(self, states, actions, rng):
        states = np.asarray(states, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        nxt = _sample_rows(self._p_cdf[states, actions], rng.random(len(states)))
        rewards = self.cmdp.reward[states, actions, nxt]
        costs = self._cost_stack[states, actions, nxt]
        return nxt, rewards, costs, self.terminal[nxt]

    def observe(self, states):
        return np.asarray(states, dtype=np.int64)


def make_risky_chain(gamma: float = 0.9, d: float = 2.0) -> TabularCmdp:
    """One state, two actions: safe (reward 1, cost 0) and risky (reward 10, cost 1)."""
    if not 0.0 <= gamma < 1.0:
        raise EnvError("gamma must lie in [0, 1)")
    if d < 0:
        raise EnvError("cost limit must be non-negative")
    P = np.ones((1, 2, 1))
    R = np.array([1.0, 10.0]).reshape(1, 2, 1)
    C = np.array([0.0, 1.0]).reshape(1, 2, 1)
    return TabularCmdp(P, R, (C,), np.array([d]), gamma, np.array([1.0]))


def risky_chain_optimum(gamma: float, d: float) -> dict:
    """Closed-form constrained optimum over Bernoulli(p = P(risky)) policies."""
    binds = d < 1.0 / (1.0 - gamma) - 1e-12
    p = min(1.0, d * (1.0 - gamma)) if binds else 1.0
    return {
        "p": p,
        "R": (1.0 + 9.0 * p) / (1.0 - gamma),
        "C": p / (1.0 - gamma),
        "lambda": 9.0 if binds else 0.0,
    }


class GridStateSpace:
    """Enumeration of fixed-layout GridGather states for tabular models.

    States are (agent cell, remaining-apple mask, remaining-bomb mask, step).
    When the layout holds no items the step counter cannot influence reward
    or cost and is dropped, leaving one state per cell.
    """

    def __init__(self, spec: GridGatherSpec):
        self.spec = spec
        self.apples_list, self.bombs_list = (sorted(s) for s in fixed_layout(spec))
        self.n_apples = len(self.apples_list)
        self.n_bombs = len(self.bombs_list)
        self.with_time = self.n_apples + self.n_bombs > 0
        self.n_steps = spec.episode_length + 1 if self.with_time else 1
        self.size = spec.num_cells * 2 ** self.n_apples * 2 ** self.n_bombs * self.n_steps
        if self.size > MAX_TABULAR_STATES:
            raise EnvError(f"enumerated state space has {self.size} states (limit {MAX_TABULAR_STATES})")

    def masks(self, state: EnvState) -> tuple[int, int]:
        am = sum(1 << i for i, c in enumerate(self.apples_list) if c in state.apples)
        bm = sum(1 << i for i, c in enumerate(self.bombs_list) if c in state.bombs)
        return am, bm

    def index_of(self, cell: int, am: int, bm: int, step: int) -> int:
        if not self.with_time:
            step = 0
        return ((cell * 2 ** self.n_apples + am) * 2 ** self.n_bombs + bm) * self.n_steps + step

    def index(self, state: EnvState) -> int:
        am, bm = self.masks(state)
        return self.index_of(state.agent, am, bm, state.step)

    def decode(self, idx: int) -> EnvState:
        rest, step = divmod(idx, self.n_steps)
        rest, bm = divmod(rest, 2 ** self.n_bombs)
        cell, am = divmod(rest, 2 ** self.n_apples)
        apples = frozenset(c for i, c in enumerate(self.apples_list) if am >> i & 1)
        bombs = frozenset(c for i, c in enumerate(self.bombs_list) if bm >> i & 1)
        return EnvState(cell, apples, bombs, step)

    def is_absorbing(self, state: EnvState) -> bool:
        return self.with_time and is_done(self.spec, state)


def grid_to_tabular(spec: GridGatherSpec, gamma: float = 0.995) -> TabularCmdp:
    """Exact TabularCmdp for a fixed-layout GridGather.

    Finished episodes become absorbing zero-reward states, so discounted
    values equal the simulator's episodic discounted sums.
    """
    space = GridStateSpace(spec)
    S, A = space.size, 4
    P = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    C = np.zeros((S, A, S))
    for idx in range(S):
        st = space.decode(idx)
        if space.is_absorbing(st):
            P[idx, :, idx] = 1.0
            continue
        for a in range(A):
            if space.with_time:
                nxt, r, c, _ = env_step(spec, st, a)
            else:
                nxt, r, c = EnvState(move(spec, st.agent, a), st.apples, st.bombs, 0), 0.0, 0.0
            j = space.index(nxt)
            P[idx, a, j] = 1.0
            R[idx, a, j] = r
            C[idx, a, j] = c
    apples, bombs = fixed_layout(spec)
    free = [c for c in range(spec.num_cells) if c not in apples and c not in bombs]
    p0 = np.zeros(S)
    full_a, full_b = 2 ** space.n_apples - 1, 2 ** space.n_bombs - 1
    for cell in free:
        p0[space.index_of(cell, full_a, full_b, 0)] = 1.0 / len(free)
    return TabularCmdp(P, R, (C,), np.array([spec.cost_limit]), gamma, p0)


def grid_absorbing_states(spec: GridGatherSpec) -> np.ndarray:
    space = GridStateSpace(spec)
    return np.array([i for i in range(space.size) if space.is_absorbing(space.decode(i))], dtype=np.int64)


class GridGatherEnv(Env):
    """GridGather simulator.

    With ``tabular=True`` (fixed layout only) observations are the integer
    indices of :class:`GridStateSpace`; otherwise they are feature vectors
    [agent one-hot | apple map | bomb map | elapsed fraction].
    """

    def __init__(self, spec: GridGatherSpec, tabular: bool = False):
        self.spec = spec
        self.num_actions = 4
        self.num_costs = 1
        self.limits = np.array([spec.cost_limit])
        self.max_steps = spec.episode_length
        self.space = GridStateSpace(spec) if tabular else None
        if tabular:
            self.num_states = self.space.size
            self.obs_dim = self.space.size
        else:
            self.obs_dim = 3 * spec.num_cells + 1

    def reset_batch(self, n, rng):
        return [env_reset(self.spec, rng) for _ in range(n)]

    def step_batch(self, states, actions, rng):
        out = [env_step(self.spec, s, int(a)) for s, a in zip(states, actions)]
        nxt = [o[0] for o in out]
        rewards = np.array([o[1] for o in out])
        costs = np.array([[o[2]] for o in out]).reshape(len(out), 1)
        dones = np.array([o[3] for o in out], dtype=bool)
        return nxt, rewards, costs, dones

    def features(self, state: EnvState) -> np.ndarray:
        n = self.spec.num_cells
        f = np.zeros(3 * n + 1)
        f[state.agent] = 1.0
        for c in state.apples:
            f[n + c] = 1.0
        for c in state.bombs:
            f[2 * n + c] = 1.0
        f[-1] = state.step / self.spec.episode_length
        return f

    def observe(self, states):
        if self.space is not None:
            return np.array([self.space.index(s) for s in states], dtype=np.int64)
        return np.array([self.features(s) for s in states]).reshape(len(states), self.obs_dim)


def make_env(doc: dict) -> Env:
    """Build an environment from the ``env`` section of an experiment config."""
    doc = dict(doc)
    name = doc.pop("name", "grid_gather")
    if name == "grid_gather":
        tabular = bool(doc.pop("tabular", False))
        return GridGatherEnv(GridGatherSpec.from_json(doc), tabular=tabular)
    if name == "risky_chain":
        horizon = doc.pop("horizon", None)
        cmdp = make_risky_chain(float(doc.pop("gamma", 0.9)), float(doc.pop("d", 2.0)))
        if doc:
            raise EnvError(f"unknown risky_chain keys: {sorted(doc)}")
        return TabularEnv(cmdp, horizon=horizon)
    if name == "tabular":
        horizon = doc.pop("horizon", None)
        cmdp = TabularCmdp.load(doc.pop("path"))
        if doc:
            raise EnvError(f"unknown tabular env keys: {sorted(doc)}")
        return TabularEnv(cmdp, horizon=horizon)
    raise EnvError(f"unknown environment {name!r}")


def default_gamma(env: Env) -> float:
    if isinstance(env, TabularEnv):
        return env.cmdp.gamma
    return 0.995


__all__ = [
    "Env", "EnvError", "EnvState", "GridGatherEnv", "GridGatherSpec", "GridStateSpace",
    "TabularEnv", "env_reset", "env_step", "grid_absorbing_states", "grid_to_tabular",
    "make_env", "make_risky_chain", "risky_chain_optimum",
]
