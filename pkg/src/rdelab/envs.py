"""Small environments with exact tabular counterparts.

Three kinds are available:

* ``chain``: a 1-D corridor, start at the left end, reward 1 on reaching the
  right end.  Actions are 0 = left, 1 = right.
* ``four_rooms``: a walled grid split into four rooms joined by doorways.
  Agent and goal are placed uniformly on distinct floor cells each episode
  (or the goal is pinned with ``fixed_goal``).  Reaching the goal after ``t``
  steps pays ``10 * (1 - 0.9 * t / max_steps)``.
* ``hazard_grid``: fixed start and goal with hazard cells on the diagonal
  between them, avoidable at no extra path length.  Every step that ends on a hazard costs 1; reaching the
  goal pays 1.  Hazards never end the episode.

Grid actions are 0 = north, 1 = east, 2 = south, 3 = west.  Grid observations
are one-hot(agent floor cell) concatenated with one-hot(goal floor cell).

Layouts are ASCII maps: ``#`` wall, ``.`` floor, ``G`` goal, ``H`` hazard,
``S`` start.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ENV_KINDS = ("chain", "four_rooms", "hazard_grid")
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
SUCCESS_REWARD = 10.0


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "four_rooms"
    size: int = 9
    max_steps: int = 100
    gamma: float = 0.99
    layout_seed: int = 0
    fixed_goal: bool = False
    layout: str | None = None

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}; expected one of {ENV_KINDS}")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        min_size = 2 if self.kind == "chain" else 5
        if self.layout is None and self.size < min_size:
            raise ValueError(f"{self.kind} needs size >= {min_size}")


@dataclass
class StepResult:
    next_obs: np.ndarray
    reward: float
    cost: float
    done: bool
    truncated: bool


@dataclass
class TabularMdp:
    """Exact finite model. ``P[s, a, s']``, ``R[s, a]``, ``C[s, a]``."""

    P: np.ndarray
    R: np.ndarray
    terminal: np.ndarray
    C: np.ndarray | None = None
    observations: np.ndarray | None = None

    def __post_init__(self):
        sums = self.P.sum(axis=2)
        if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def success_reward(t: int, max_steps: int) -> float:
    return SUCCESS_REWARD * (1.0 - 0.9 * t / max_steps)


# ---------------------------------------------------------------------------
# layouts


def parse_layout(text: str) -> list[str]:
    rows = [line.rstrip() for line in text.strip("\n").splitlines() if line.strip()]
    if not rows:
        raise ValueError("empty layout")
    width = max(len(r) for r in rows)
    rows = [r.ljust(width, "#") for r in rows]
    bad = set("".join(rows)) - set("#.GHS")
    if bad:
        raise ValueError(f"unknown layout characters {sorted(bad)}")
    return rows


def four_rooms_layout(size: int, layout_seed: int = 0) -> str:
    """Square grid with a wall cross and one doorway in each wall arm."""
    rng = np.random.default_rng(layout_seed)
    grid = [["." for _ in range(size)] for _ in range(size)]
    for i in range(size):
        grid[0][i] = grid[size - 1][i] = grid[i][0] = grid[i][size - 1] = "#"
    mid = size // 2
    for i in range(size):
        grid[mid][i] = "#"
        grid[i][mid] = "#"
    low = list(range(1, mid))
    high = list(range(mid + 1, size - 1))
    grid[int(rng.choice(low))][mid] = "."
    grid[int(rng.choice(high))][mid] = "."
    grid[mid][int(rng.choice(low))] = "."
    grid[mid][int(rng.choice(high))] = "."
    return "\n".join("".join(r) for r in grid)


def hazard_layout(size: int, layout_seed: int = 0) -> str:
    """Start bottom-left, goal top-right, hazards along the diagonal between.

    Every interior cell ``(i, i)`` except the two corners is a hazard, so each
    monotone route from start to goal crosses the diagonal either on a hazard
    or at one of the free corners.  The two routes along the walls are safe
    and as short as any other, which leaves the reward indifferent and the
    cost alone deciding.  A nonzero ``layout_seed`` adds one hazard next to
    the diagonal.
    """
    inner = size - 2
    grid = [["#"] * size] + [["#"] + ["."] * inner + ["#"] for _ in range(inner)] + [["#"] * size]
    for i in range(2, size - 2):
        grid[i][i] = "H"
    if layout_seed and size > 5:
        rng = np.random.default_rng(layout_seed)
        i = int(rng.integers(2, size - 3))
        r, c = (i, i + 1) if rng.random() < 0.5 else (i + 1, i)
        grid[r][c] = "H"
    grid[size - 2][1] = "S"
    grid[1][size - 2] = "G"
    return "\n".join("".join(r) for r in grid)


# ---------------------------------------------------------------------------
# environments


class ChainEnv:
    n_actions = 2

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        self.n = spec.size
        self.obs_dim = self.n
        self._eye = np.eye(self.n)
        self.state = 0
        self.t = 0

    def observe(self, state: int) -> np.ndarray:
        return self._eye[state].copy()

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        self.state = 0
        self.t = 0
        return self.observe(0)

    def step(self, action: int) -> StepResult:
        if action not in (0, 1):
            raise ValueError(f"chain action must be 0 or 1, got {action}")
        self.t += 1
        self.state = min(self.state + 1, self.n - 1) if action == 1 else max(self.state - 1, 0)
        done = self.state == self.n - 1
        truncated = not done and self.t >= self.spec.max_steps
        return StepResult(self.observe(self.state), 1.0 if done else 0.0, 0.0, done, truncated)


class GridEnv:
    n_actions = 4

    def __init__(self, spec: EnvSpec):
        self.spec = spec
        if spec.layout is not None:
            text = spec.layout
        elif spec.kind == "four_rooms":
            text = four_rooms_layout(spec.size, spec.layout_seed)
        else:
            text = hazard_layout(spec.size, spec.layout_seed)
        self.rows = parse_layout(text)
        self.height = len(self.rows)
        self.width = len(self.rows[0])
        self.floor = [(r, c) for r in range(self.height) for c in range(self.width) if self.rows[r][c] != "#"]
        self.index = {cell: i for i, cell in enumerate(self.floor)}
        self.n_floor = len(self.floor)
        self.hazards = {cell for cell in self.floor if self.rows[cell[0]][cell[1]] == "H"}
        self.marked_goal = next((cell for cell in self.floor if self.rows[cell[0]][cell[1]] == "G"), None)
        self.marked_start = next((cell for cell in self.floor if self.rows[cell[0]][cell[1]] == "S"), None)
        if spec.kind == "hazard_grid" and (self.marked_goal is None or self.marked_start is None):
            raise ValueError("hazard_grid layout needs an S and a G cell")
        self.obs_dim = 2 * self.n_floor
        self._eye = np.eye(self.n_floor)
        self.pos = self.floor[0]
        self.goal = self.marked_goal or self.floor[-1]
        self.t = 0

    @property
    def randomized_goal(self) -> bool:
        return self.spec.kind == "four_rooms" and not self.spec.fixed_goal

    def pinned_goal(self) -> tuple[int, int]:
        if self.marked_goal is not None:
            return self.marked_goal
        return self.floor[-1]

    def observe(self, pos, goal) -> np.ndarray:
        return np.concatenate([self._eye[self.index[pos]], self._eye[self.index[goal]]])

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.t = 0
        if self.spec.kind == "hazard_grid":
            self.pos, self.goal = self.marked_start, self.marked_goal
        elif self.randomized_goal:
            i, j = rng.choice(self.n_floor, size=2, replace=False)
            self.goal, self.pos = self.floor[int(i)], self.floor[int(j)]
        else:
            self.goal = self.pinned_goal()
            j = int(rng.integers(self.n_floor - 1))
            candidates = [c for c in self.floor if c != self.goal]
            self.pos = candidates[j]
        return self.observe(self.pos, self.goal)

    def move(self, pos, action: int):
        dr, dc = MOVES[action]
        nxt = (pos[0] + dr, pos[1] + dc)
        if 0 <= nxt[0] < self.height and 0 <= nxt[1] < self.width and self.rows[nxt[0]][nxt[1]] != "#":
            return nxt
        return pos

    def step(self, action: int) -> StepResult:
        if not 0 <= action < 4:
            raise ValueError(f"grid action must be in 0..3, got {action}")
        self.t += 1
        self.pos = self.move(self.pos, action)
        done = self.pos == self.goal
        if done:
            reward = success_reward(self.t, self.spec.max_steps) if self.spec.kind == "four_rooms" else 1.0
        else:
            reward = 0.0
        cost = 1.0 if self.pos in self.hazards else 0.0
        truncated = not done and self.t >= self.spec.max_steps
        return StepResult(self.observe(self.pos, self.goal), reward, cost, done, truncated)


def make_env(spec: EnvSpec) -> ChainEnv | GridEnv:
    if spec.kind == "chain":
        return ChainEnv(spec)
    return GridEnv(spec)


# ---------------------------------------------------------------------------
# tabular model and oracle


def to_tabular(spec: EnvSpec) -> TabularMdp:
    """Enumerate the dynamics of ``spec`` as a stationary MDP.

    FourRooms success reward is time dependent; the tabular model uses its
    undiscounted ceiling (10) for entering the goal.
    """
    env = make_env(spec)
    if isinstance(env, ChainEnv):
        n = env.n
        P = np.zeros((n, 2, n))
        R = np.zeros((n, 2))
        terminal = np.zeros(n, dtype=bool)
        terminal[n - 1] = True
        for s in range(n):
            for a in (0, 1):
                if terminal[s]:
                    P[s, a, s] = 1.0
                    continue
                nxt = min(s + 1, n - 1) if a == 1 else max(s - 1, 0)
                P[s, a, nxt] = 1.0
                R[s, a] = 1.0 if nxt == n - 1 else 0.0
        return TabularMdp(P, R, terminal, np.zeros_like(R), np.eye(n))

    if env.randomized_goal:
        raise ValueError("four_rooms with a randomized goal is not a single stationary MDP; set fixed_goal")
    goal = env.pinned_goal()
    goal_reward = SUCCESS_REWARD if spec.kind == "four_rooms" else 1.0
    n = env.n_floor
    P = np.zeros((n, 4, n))
    R = np.zeros((n, 4))
    C = np.zeros((n, 4))
    terminal = np.zeros(n, dtype=bool)
    terminal[env.index[goal]] = True
    for s, cell in enumerate(env.floor):
        for a in range(4):
            if terminal[s]:
                P[s, a, s] = 1.0
                continue
            nxt = env.move(cell, a)
            P[s, a, env.index[nxt]] = 1.0
            R[s, a] = goal_reward if nxt == goal else 0.0
            C[s, a] = 1.0 if nxt in env.hazards else 0.0
    obs = np.stack([env.observe(cell, goal) for cell in env.floor])
    return TabularMdp(P, R, terminal, C, obs)


def bellman_backup(mdp: TabularMdp, Q: np.ndarray, gamma: float) -> np.ndarray:
    v = Q.max(axis=1)
    out = mdp.R + gamma * (mdp.P @ v)
    out[mdp.terminal] = mdp.R[mdp.terminal]
    return out


def value_iteration(mdp: TabularMdp, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Optimal action values; returned table has Bellman residual below ``tol``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q = np.zeros_like(mdp.R, dtype=float)
    for _ in range(max_iter):
        nxt = bellman_backup(mdp, Q, gamma)
        # residual of nxt is at most gamma * |nxt - Q|
        if np.max(np.abs(nxt - Q)) < tol:
            return nxt
        Q = nxt
    raise RuntimeError("value iteration did not converge")
