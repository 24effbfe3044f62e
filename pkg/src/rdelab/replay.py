"""FIFO replay buffer backed by preallocated numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    cost: float
    next_obs: np.ndarray
    done: bool

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("transition cost must be non-negative")


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    costs: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def transitions(self) -> list[Transition]:
        return [
            Transition(self.obs[i], int(self.actions[i]), float(self.rewards[i]), float(self.costs[i]),
                       self.next_obs[i], bool(self.dones[i]))
            for i in range(len(self))
        ]


class ReplayBuffer:
    """Ring buffer; once full, each push overwrites the oldest entry.

    Time-limit truncations should be pushed with ``done=False`` so that
    bootstrapping continues past them.
    """

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs_dim = int(obs_dim)
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.costs = np.zeros(capacity)
        self.dones = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action: int, reward: float, cost: float, next_obs, done: bool) -> None:
        obs = np.asarray(obs, dtype=float)
        next_obs = np.asarray(next_obs, dtype=float)
        if obs.shape != (self.obs_dim,) or next_obs.shape != (self.obs_dim,):
            raise ValueError(f"observation width must be {self.obs_dim}")
        if cost < 0:
            raise ValueError("transition cost must be non-negative")
        i = self.cursor
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.costs[i] = cost
        self.dones[i] = done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push(self, t: Transition) -> None:
        self.add(t.obs, t.action, t.reward, t.cost, t.next_obs, t.done)

    def _take(self, idx: np.ndarray) -> Batch:
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.costs[idx],
                     self.next_obs[idx], self.dones[idx])

    def ordered(self) -> Batch:
        """Stored transitions, oldest first."""
        start = self.cursor if self.size == self.capacity else 0
        idx = (start + np.arange(self.size)) % self.capacity
        return self._take(idx)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform draw with replacement."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        return self._take(rng.integers(self.size, size=batch_size))
