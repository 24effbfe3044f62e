"""Learners that fill one ensemble slot: DQN and a CVaR-constrained actor-critic."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import (
    Mlp,
    NonFiniteError,
    adam_init,
    adam_step,
    backward,
    forward,
    predict,
    mlp_init,
    norm_pdf,
    norm_ppf,
    reset_layers,
    softmax,
)
from .replay import Batch


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 0.9
    end: float = 0.05
    decay_steps: int = 100_000

    def __post_init__(self):
        if not (0.0 <= self.start <= 1.0 and 0.0 <= self.end <= 1.0):
            raise ValueError("epsilon bounds must lie in [0, 1]")
        if self.decay_steps < 1:
            raise ValueError("decay_steps must be positive")

    def value(self, step: int) -> float:
        if step >= self.decay_steps:
            return self.end
        frac = max(step, 0) / self.decay_steps
        return self.start + frac * (self.end - self.start)


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximum: lowest index wins ties
    return int(np.argmax(q))


def epsilon_greedy(q: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    explore = rng.random() < epsilon
    if explore:
        return int(rng.integers(len(q)))
    return greedy(q)


def cvar_coefficient(alpha_risk: float) -> float:
    if not 0.0 < alpha_risk <= 1.0:
        raise ValueError(f"alpha_risk must lie in (0, 1], got {alpha_risk}")
    if alpha_risk == 1.0:
        return 0.0
    return norm_pdf(norm_ppf(alpha_risk)) / alpha_risk


def cvar(q_c, var_c, alpha_risk: float):
    """Gaussian CVaR of the discounted cost: mean + pdf(ppf(a)) / a * std.

    ``alpha_risk = 1`` is the risk-neutral limit and returns the mean.
    """
    var_c = np.asarray(var_c, dtype=float)
    if np.any(var_c < 0):
        raise ValueError("variance must be non-negative")
    out = np.asarray(q_c, dtype=float) + cvar_coefficient(alpha_risk) * np.sqrt(var_c)
    return float(out) if out.ndim == 0 else out


def dqn_td_target(batch: Batch, target_q: Mlp, gamma: float) -> np.ndarray:
    q_next = predict(target_q, batch.next_obs)
    return batch.rewards + gamma * (~batch.dones) * q_next.max(axis=1)


def _mse_head_grad(q_all: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss mean((Q(s,a) - y)^2) and its gradient w.r.t. the full output."""
    rows = np.arange(len(actions))
    td = q_all[rows, actions] - targets
    loss = float(np.mean(td * td))
    if not math.isfinite(loss):
        raise DivergenceError("non-finite TD loss")
    grad = np.zeros_like(q_all)
    grad[rows, actions] = 2.0 * td / len(actions)
    return loss, grad


def _soft_update(target: Mlp, online: Mlp, tau: float) -> Mlp:
    return Mlp(target.layer_dims, (1.0 - tau) * target.flat + tau * online.flat)


def _depth(depth, n_layers: int) -> int:
    return n_layers if depth in (None, "all") else int(depth)


class DqnAgent:
    """Q-network with a target copy.

    ``tau`` selects Polyak averaging after every update; with ``tau=None`` the
    target is hard-copied every ``target_period`` updates.
    """

    kind = "dqn"

    def __init__(self, obs_dim: int, n_actions: int, rng: np.random.Generator, *, hidden=(64, 64),
                 lr: float = 3e-4, gamma: float = 0.99, tau: float | None = 0.005, target_period: int = 1000):
        if tau is not None and not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        self.dims = (obs_dim, *hidden, n_actions)
        self.n_actions = n_actions
        self.lr = lr
        self.gamma = gamma
        self.tau = tau
        self.target_period = target_period
        self.online = mlp_init(self.dims, rng)
        self.target = self.online.copy()
        self.adam = adam_init(self.online)
        self.updates = 0

    def action_values(self, obs) -> np.ndarray:
        return predict(self.online, obs)

    def act(self, obs, rng: np.random.Generator, epsilon: float = 0.0) -> int:
        return epsilon_greedy(self.action_values(obs), epsilon, rng)

    def act_greedy(self, obs) -> int:
        return greedy(self.action_values(obs))

    def update(self, batch: Batch, rng: np.random.Generator | None = None) -> float:
        y = dqn_td_target(batch, self.target, self.gamma)
        q_all, cache = forward(self.online, batch.obs)
        loss, grad = _mse_head_grad(q_all, batch.actions, y)
        grads = backward(self.online, cache, grad)
        self.online, self.adam = adam_step(self.online, grads, self.adam, self.lr)
        self.updates += 1
        if self.tau is not None:
            self.target = _soft_update(self.target, self.online, self.tau)
        elif self.updates % self.target_period == 0:
            self.target = self.online.copy()
        return loss

    def reset(self, depth, rng: np.random.Generator) -> None:
        self.online, self.adam = reset_layers(self.online, self.adam, _depth(depth, self.online.n_layers), rng)
        self.target = self.online.copy()


@dataclass
class SafeLosses:
    actor: float
    reward_critic: float
    cost_critic: float
    std_critic: float
    lam: float


class SafeAcAgent:
    """Categorical actor with reward, cost-mean and cost-std critics.

    The cost-std critic outputs ``log std``; its exponential is the standard
    deviation of the discounted cost sum.  The actor maximizes
    ``E_pi[Q_r - lam * CVaR]`` and ``lam`` follows projected dual ascent on
    ``CVaR - cost_budget``.
    """

    kind = "safe_ac"
    LOG_STD_BOUNDS = (-20.0, 10.0)

    def __init__(self, obs_dim: int, n_actions: int, rng: np.random.Generator, *, hidden=(64, 64),
                 lr: float = 3e-4, actor_lr: float | None = None, gamma: float = 0.99, tau: float = 0.005,
                 alpha_risk: float = 0.5, cost_budget: float = 25.0, lam_init: float = 0.0,
                 lam_lr: float = 0.01, logit_l2: float = 1e-4):
        self.alpha_risk = alpha_risk
        self.risk_coef = cvar_coefficient(alpha_risk)
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        self.dims = (obs_dim, *hidden, n_actions)
        self.n_actions = n_actions
        self.lr = lr
        self.actor_lr = actor_lr if actor_lr is not None else lr
        self.gamma = gamma
        self.tau = tau
        self.cost_budget = cost_budget
        self.lam_init = lam_init
        self.lam_lr = lam_lr
        self.logit_l2 = logit_l2
        self._build(rng)

    def _build(self, rng):
        self.nets = {name: mlp_init(self.dims, rng) for name in ("actor", "reward", "cost", "std")}
        self._fresh_state()

    def _fresh_state(self):
        self.targets = {name: self.nets[name].copy() for name in ("reward", "cost", "std")}
        self.adams = {name: adam_init(net) for name, net in self.nets.items()}
        self.lam = self.lam_init
        self.updates = 0

    # -- evaluation helpers
    def policy(self, obs) -> np.ndarray:
        return softmax(predict(self.nets["actor"], obs))

    def action_values(self, obs) -> np.ndarray:
        return predict(self.nets["reward"], obs)

    def _std(self, net: Mlp, obs) -> np.ndarray:
        raw = predict(net, obs)
        return np.exp(np.clip(raw, *self.LOG_STD_BOUNDS))

    def action_risks(self, obs) -> np.ndarray:
        mean = predict(self.nets["cost"], obs)
        std = self._std(self.nets["std"], obs)
        return mean + self.risk_coef * std

    def act(self, obs, rng: np.random.Generator, epsilon: float = 0.0) -> int:
        p = self.policy(obs)
        return int(min(np.searchsorted(np.cumsum(p), rng.random(), side="right"), self.n_actions - 1))

    def act_greedy(self, obs) -> int:
        return greedy(predict(self.nets["actor"], obs))

    # -- learning
    def _critic_step(self, name: str, obs, actions, targets, transform_exp: bool = False) -> float:
        net = self.nets[name]
        out, cache = forward(net, obs)
        rows = np.arange(len(actions))
        if transform_exp:
            raw = out[rows, actions]
            lo, hi = self.LOG_STD_BOUNDS
            clipped = np.clip(raw, lo, hi)
            pred = np.exp(clipped)
            td = pred - targets
            loss = float(np.mean(td * td))
            grad = np.zeros_like(out)
            grad[rows, actions] = 2.0 * td * pred * ((raw > lo) & (raw < hi)) / len(actions)
        else:
            loss, grad = _mse_head_grad(out, actions, targets)
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite {name} critic loss")
        grads = backward(net, cache, grad)
        self.nets[name], self.adams[name] = adam_step(net, grads, self.adams[name], self.lr)
        return loss

    def update(self, batch: Batch, rng: np.random.Generator) -> float:
        return self.update_all(batch, rng).reward_critic

    def update_all(self, batch: Batch, rng: np.random.Generator) -> SafeLosses:
        n = len(batch)
        rows = np.arange(n)
        alive = (~batch.dones).astype(float)
        g = self.gamma

        p_next = softmax(predict(self.nets["actor"], batch.next_obs))
        u = rng.random(n)
        a_next = np.minimum((np.cumsum(p_next, axis=1) <= u[:, None]).sum(axis=1), self.n_actions - 1)

        qr_next = predict(self.targets["reward"], batch.next_obs)[rows, a_next]
        qc_next = predict(self.targets["cost"], batch.next_obs)[rows, a_next]
        std_next = self._std(self.targets["std"], batch.next_obs)[rows, a_next]
        qc_now = predict(self.nets["cost"], batch.obs)[rows, batch.actions]

        c = batch.costs
        y_r = batch.rewards + g * alive * qr_next
        y_c = c + g * alive * qc_next
        second = c * c + alive * (2.0 * g * c * qc_next + g * g * (std_next**2 + qc_next**2))
        y_std = np.sqrt(np.maximum(0.0, second - qc_now**2))

        loss_r = self._critic_step("reward", batch.obs, batch.actions, y_r)
        loss_c = self._critic_step("cost", batch.obs, batch.actions, y_c)
        loss_s = self._critic_step("std", batch.obs, batch.actions, y_std, transform_exp=True)

        # actor: exact expectation over the categorical policy
        logits, cache = forward(self.nets["actor"], batch.obs)
        pi = softmax(logits)
        q_r = self.action_values(batch.obs)
        risk = self.action_risks(batch.obs)
        adv = q_r - self.lam * risk
        objective = (pi * adv).sum(axis=1)
        actor_loss = float(-objective.mean() + self.logit_l2 * np.mean(np.sum(logits**2, axis=1)))
        if not math.isfinite(actor_loss):
            raise DivergenceError("non-finite actor loss")
        d_logits = -pi * (adv - objective[:, None]) / n + 2.0 * self.logit_l2 * logits / n
        grads = backward(self.nets["actor"], cache, d_logits)
        self.nets["actor"], self.adams["actor"] = adam_step(self.nets["actor"], grads, self.adams["actor"],
                                                            self.actor_lr)

        observed = float((pi * risk).sum(axis=1).mean())
        self.lam = max(0.0, self.lam + self.lam_lr * (observed - self.cost_budget))

        for name in self.targets:
            self.targets[name] = _soft_update(self.targets[name], self.nets[name], self.tau)
        self.updates += 1
        return SafeLosses(actor_loss, loss_r, loss_c, loss_s, self.lam)

    def reset(self, depth, rng: np.random.Generator) -> None:
        for name, net in self.nets.items():
            d = _depth(depth, net.n_layers)
            self.nets[name], self.adams[name] = reset_layers(net, self.adams[name], d, rng)
        for name in self.targets:
            self.targets[name] = self.nets[name].copy()
        self.lam = self.lam_init
