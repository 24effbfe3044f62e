"""Sequentially reset ensemble with value-weighted action composition.

Each step every member proposes an action.  The member whose last reset lies
furthest in the past (the *oldest* one) scores all proposals with its own
value estimates, and the executed proposal is drawn from a softmax over those
scores.  Until the first reset the draw is uniform.  Every
``reset_interval`` environment steps exactly one member is reset, cycling
through the indices 0, 1, ..., N-1, 0, ...
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import NonFiniteError, softmax

NORM_FLOOR = 1e-8
TEMPERATURE_MODES = ("normalized_logits", "as_printed")


@dataclass
class SelectionDistribution:
    p: np.ndarray
    chosen: int
    q_hat_values: np.ndarray
    oldest_index: int
    proposals: tuple[int, ...] = ()
    c_hat_values: np.ndarray | None = None

    @property
    def action(self) -> int:
        return self.proposals[self.chosen]


@dataclass(frozen=True)
class ResetEvent:
    step: int
    agent_index: int


def _finite(x, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise ValueError(f"{what} is empty")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite {what}")
    return x


def selection_probs(q_hat, beta: float, temperature_mode: str = "normalized_logits") -> np.ndarray:
    """Softmax over the oldest member's values of each proposal.

    ``normalized_logits`` uses ``beta * q / max|q|``: beta = 0 is uniform,
    larger beta concentrates on the best proposal, negative beta inverts the
    preference.  ``as_printed`` divides by the temperature ``beta / max(q)``
    literally, which needs beta != 0.
    """
    q = _finite(q_hat, "value estimates")
    if temperature_mode == "normalized_logits":
        scale = max(float(np.max(np.abs(q))), NORM_FLOOR)
        return softmax(beta * q / scale)
    if temperature_mode == "as_printed":
        if beta == 0:
            raise ValueError("as_printed temperature is undefined for beta = 0")
        return softmax(q * float(np.max(q)) / beta)
    raise ValueError(f"unknown temperature_mode {temperature_mode!r}")


def safe_selection_probs(c_hat, beta: float) -> np.ndarray:
    """Like :func:`selection_probs` on negated CVaR values, so low risk wins."""
    c = _finite(c_hat, "CVaR estimates")
    scale = max(float(np.max(np.abs(c))), NORM_FLOOR)
    return softmax(-beta * c / scale)


def mix_safe(p_reward, p_cost, kappa: float) -> np.ndarray:
    p_reward = np.asarray(p_reward, dtype=float)
    p_cost = np.asarray(p_cost, dtype=float)
    if p_reward.shape != p_cost.shape:
        raise ValueError("probability vectors differ in length")
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    return kappa * p_reward + (1.0 - kappa) * p_cost


def sample_index(p: np.ndarray, rng: np.random.Generator) -> int:
    u = rng.random()
    return int(min(np.searchsorted(np.cumsum(p), u, side="right"), len(p) - 1))


@dataclass
class Ensemble:
    """N agents plus the reset scheduler.

    ``reset_interval=None`` disables resets (base algorithm).  ``mode`` is
    ``"reward"`` or ``"safe"``; safe mode mixes the reward-based distribution
    with a CVaR-based one using ``kappa``.
    """

    agents: list
    reset_interval: int | None = None
    beta: float = 50.0
    kappa: float = 1.0
    mode: str = "reward"
    reset_depth: int | str = "all"
    temperature_mode: str = "normalized_logits"
    k: int = 0
    last_reset_step: list[int] = field(default_factory=list)
    any_reset_yet: bool = False

    def __post_init__(self):
        if not self.agents:
            raise ValueError("ensemble needs at least one agent")
        if self.reset_interval is not None and self.reset_interval < 1:
            raise ValueError("reset interval must be a positive number of steps")
        if self.mode not in ("reward", "safe"):
            raise ValueError(f"unknown selection mode {self.mode!r}")
        if self.temperature_mode not in TEMPERATURE_MODES:
            raise ValueError(f"unknown temperature_mode {self.temperature_mode!r}")
        if not self.last_reset_step:
            self.last_reset_step = [-1] * len(self.agents)

    @property
    def n(self) -> int:
        return len(self.agents)

    def oldest_agent_index(self) -> int:
        # never-reset members carry -1 and therefore rank oldest; argmin breaks ties low
        return int(np.argmin(self.last_reset_step))

    def propose(self, obs, rng: np.random.Generator | None, epsilon: float, greedy: bool) -> tuple[int, ...]:
        if greedy:
            return tuple(agent.act_greedy(obs) for agent in self.agents)
        return tuple(agent.act(obs, rng, epsilon) for agent in self.agents)

    def distribution(self, obs, proposals) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, int]:
        oldest = self.oldest_agent_index()
        idx = list(proposals)
        ref = self.agents[oldest]
        q_hat = ref.action_values(obs)[idx]
        c_hat = ref.action_risks(obs)[idx] if self.mode == "safe" else None
        if not self.any_reset_yet:
            return np.full(self.n, 1.0 / self.n), q_hat, c_hat, oldest
        p = selection_probs(q_hat, self.beta, self.temperature_mode)
        if self.mode == "safe":
            p = mix_safe(p, safe_selection_probs(c_hat, self.beta), self.kappa)
        return p, q_hat, c_hat, oldest

    def select_action(self, obs, rng: np.random.Generator, epsilon: float = 0.0,
                      greedy: bool = False) -> tuple[int, SelectionDistribution]:
        """Gather proposals, weight them, and draw the executed one.

        ``greedy=True`` is the evaluation path: members act greedily, but the
        composition draw still uses ``rng``.
        """
        proposals = self.propose(obs, rng, epsilon, greedy)
        if self.n == 1:
            sel = SelectionDistribution(np.ones(1), 0, np.zeros(1), 0, proposals)
            return proposals[0], sel
        p, q_hat, c_hat, oldest = self.distribution(obs, proposals)
        chosen = sample_index(p, rng)
        sel = SelectionDistribution(p, chosen, q_hat, oldest, proposals, c_hat)
        return proposals[chosen], sel

    def maybe_reset(self, env_step: int, rng: np.random.Generator | list) -> ResetEvent | None:
        """Reset member ``k`` when ``env_step`` hits a positive interval multiple.

        ``rng`` may be a list with one generator per member.
        """
        if self.reset_interval is None or env_step <= 0 or env_step % self.reset_interval:
            return None
        k = self.k
        agent_rng = rng[k] if isinstance(rng, (list, tuple)) else rng
        self.agents[k].reset(self.reset_depth, agent_rng)
        self.last_reset_step[k] = env_step
        self.any_reset_yet = True
        self.k = (k + 1) % self.n
        return ResetEvent(env_step, k)
