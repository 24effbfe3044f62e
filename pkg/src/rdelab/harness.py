"""Experiment runner: training loop, evaluation, aggregation and sweeps."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .agents import DivergenceError, DqnAgent, EpsilonSchedule, SafeAcAgent
from .ensemble import Ensemble, ResetEvent
from .envs import EnvSpec, make_env
from .nn import NonFiniteError, make_rng
from .replay import ReplayBuffer

log = logging.getLogger(__name__)

ALGORITHMS = ("base", "vanilla_reset", "rde", "base_safe", "sr_safe", "rde_safe")
ALGORITHM_ALIASES = {"sr": "vanilla_reset", "dqn": "base", "sr_dqn": "vanilla_reset", "rde_dqn": "rde"}

# RNG stream ids; each concern draws from its own stream
STREAM_ACT = 1
STREAM_ENV = 2
STREAM_REPLAY = 3
STREAM_UPDATE = 4
STREAM_INIT = 1_000
STREAM_EVAL = 1_000_000


@dataclass(frozen=True)
class ExperimentConfig:
    algorithm: str = "rde"
    env_kind: str = "four_rooms"
    env_size: int = 9
    max_steps: int = 100
    fixed_goal: bool = False
    layout_seed: int = 0
    gamma: float = 0.99
    n_agents: int = 2
    replay_ratio: float = 1.0
    base_reset_interval: int = 100_000
    reset_depth: str = "all"
    beta: float = 50.0
    kappa: float = 0.8
    temperature_mode: str = "normalized_logits"
    alpha_risk: float = 0.5
    cost_budget: float = -1.0
    lam_init: float = 0.0
    lam_lr: float = 0.01
    logit_l2: float = 1e-4
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 3e-4
    batch_size: int = 32
    buffer_capacity: int = 500_000
    target_update: str = "hard"
    tau: float = 0.005
    target_period: int = 1000
    eps_start: float = 0.9
    eps_end: float = 0.05
    eps_decay_steps: int = 100_000
    learning_starts: int = 0
    shared_minibatch: bool = False
    total_env_steps: int = 200_000
    eval_every: int = 2000
    eval_episodes: int = 20
    final_evals: int = 1
    collapse_window: int = 10
    trace_selection: bool = False
    seed: int = 0

    def __post_init__(self):
        alg = ALGORITHM_ALIASES.get(self.algorithm, self.algorithm)
        object.__setattr__(self, "algorithm", alg)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "reset_depth", str(self.reset_depth))
        if alg not in ALGORITHMS:
            raise ValueError(f"algorithm: unknown value {alg!r}; expected one of {ALGORITHMS}")
        if alg.startswith("rde") and self.n_agents < 2:
            raise ValueError("n_agents: rde needs at least 2 agents")
        if self.n_agents < 1:
            raise ValueError("n_agents must be >= 1")
        if self.replay_ratio <= 0:
            raise ValueError("replay_ratio must be positive")
        if self.base_reset_interval < 1:
            raise ValueError("base_reset_interval must be positive")
        if self.reset_depth != "all" and not self.reset_depth.isdigit():
            raise ValueError(f"reset_depth: expected 'all' or an integer, got {self.reset_depth!r}")
        if self.target_update not in ("hard", "soft"):
            raise ValueError("target_update must be 'hard' or 'soft'")
        if self.batch_size < 1 or self.buffer_capacity < 1:
            raise ValueError("batch_size and buffer_capacity must be positive")
        if self.total_env_steps < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise ValueError("total_env_steps, eval_every and eval_episodes must be positive")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        self.env_spec()

    # derived quantities
    @property
    def safe(self) -> bool:
        return self.algorithm.endswith("_safe")

    @property
    def uses_reset(self) -> bool:
        return self.algorithm in ("vanilla_reset", "rde", "sr_safe", "rde_safe")

    @property
    def effective_n_agents(self) -> int:
        return self.n_agents if self.algorithm.startswith("rde") else 1

    @property
    def resolved_cost_budget(self) -> float:
        if self.cost_budget >= 0:
            return self.cost_budget
        return 25.0 * min(1.0, self.max_steps / 1000)

    @property
    def depth(self) -> int | str:
        return "all" if self.reset_depth == "all" else int(self.reset_depth)

    def env_spec(self) -> EnvSpec:
        return EnvSpec(self.env_kind, self.env_size, self.max_steps, self.gamma, self.layout_seed, self.fixed_goal)

    def reset_interval(self) -> int | None:
        if not self.uses_reset:
            return None
        return reset_interval_for(self.base_reset_interval, self.replay_ratio, self.effective_n_agents)


def reset_interval_for(base_interval: int, replay_ratio: float, n_agents: int) -> int:
    """Env-step gap between consecutive reset events: floor(T / (N * rr)).

    ``base_interval`` counts gradient updates of a single agent at rr = 1.
    """
    if base_interval <= 0 or replay_ratio <= 0 or n_agents < 1:
        raise ValueError("reset interval inputs must be positive")
    gap = math.floor(Fraction(base_interval) / (n_agents * Fraction(str(replay_ratio))))
    if gap == 0:
        raise ValueError(f"reset interval {base_interval}/({n_agents}*{replay_ratio}) floors to 0 steps")
    return gap


def updates_due(replay_ratio: float, step: int) -> int:
    """Updates owed at 1-based ``step``: floor(rr*step) - floor(rr*(step-1))."""
    if step < 1:
        return 0
    rr = Fraction(str(replay_ratio))
    return math.floor(rr * step) - math.floor(rr * (step - 1))


# ---------------------------------------------------------------------------
# aggregation


def iqm(scores) -> float:
    """Interquartile mean: drop floor(n/4) values from each end, average the rest."""
    vals = sorted(float(s) for s in scores)
    if not vals:
        raise ValueError("iqm of an empty list")
    k = len(vals) // 4
    mid = vals[k: len(vals) - k]
    return math.fsum(mid) / len(mid)


def normalize_scores(scores, baseline_scores) -> tuple[list[float], bool]:
    """Divide by the baseline mean. Returns ``(values, normalized)``.

    A zero baseline mean cannot normalize anything; the raw scores come back
    with ``normalized=False``.
    """
    base = list(baseline_scores)
    if not base:
        raise ValueError("empty baseline")
    mean = math.fsum(base) / len(base)
    if mean == 0:
        return [float(s) for s in scores], False
    return [float(s) / mean for s in scores], True


@dataclass
class CollapseReport:
    drops: list[float]
    skipped: list[int]

    @property
    def max(self) -> float:
        return max(self.drops) if self.drops else 0.0

    @property
    def mean(self) -> float:
        return math.fsum(self.drops) / len(self.drops) if self.drops else 0.0


def collapse_metric(eval_steps, eval_values, reset_steps, window: int, pre_points: int = 3,
                    eps: float = 1e-8) -> CollapseReport:
    """Relative post-reset drop of the evaluation curve, one value per reset.

    ``pre`` averages the last ``pre_points`` evaluations strictly before the
    reset; ``post_min`` is the minimum over the next ``window`` evaluations.
    An evaluation logged at the reset step itself ran after the reset, so it
    counts as post-reset.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    steps = np.asarray(eval_steps)
    vals = np.asarray(eval_values, dtype=float)
    if steps.size == 0:
        raise ValueError("empty evaluation curve")
    drops, skipped = [], []
    for t in reset_steps:
        before = vals[steps < t][-pre_points:]
        after = vals[steps >= t][:window]
        if before.size == 0 or after.size == 0:
            skipped.append(int(t))
            continue
        pre = float(np.mean(before))
        drops.append(max(0.0, (pre - float(after.min())) / max(pre, eps)))
    return CollapseReport(drops, skipped)


# ---------------------------------------------------------------------------
# running


@dataclass
class MetricsLog:
    config: ExperimentConfig
    rows: list[dict] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_returns: list[float] = field(default_factory=list)
    eval_costs: list[float] = field(default_factory=list)
    reset_events: list[ResetEvent] = field(default_factory=list)
    updates_per_agent: list[int] = field(default_factory=list)
    cumulative_cost: float = 0.0
    episodes: int = 0
    p_trace: np.ndarray | None = None
    chosen_trace: np.ndarray | None = None
    diverged: bool = False
    message: str = ""
    wall_seconds: float = 0.0

    @property
    def final_return(self) -> float:
        tail = self.eval_returns[-self.config.final_evals:]
        return math.fsum(tail) / len(tail) if tail else float("nan")

    def collapse(self, window: int | None = None) -> CollapseReport:
        if not self.eval_steps:
            return CollapseReport([], [e.step for e in self.reset_events])
        w = window or self.config.collapse_window
        return collapse_metric(self.eval_steps, self.eval_returns, [e.step for e in self.reset_events], w)

    def summary(self) -> dict:
        col = self.collapse()
        return {
            "config": asdict(self.config),
            "final_return": self.final_return,
            "cumulative_cost": self.cumulative_cost,
            "collapse_max": col.max,
            "collapse_mean": col.mean,
            "resets": len(self.reset_events),
            "updates_per_agent": self.updates_per_agent,
            "diverged": self.diverged,
            "message": self.message,
            "wall_seconds": self.wall_seconds,
        }

    def csv_columns(self) -> list[str]:
        n = self.config.effective_n_agents
        return ["env_step", "eval_return_mean", "eval_return_std", "eval_cost_mean", "train_loss",
                "reset_agent_index", *[f"p_select_{i}" for i in range(n)], "cumulative_train_cost"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.csv_columns(), lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(v) for k, v in row.items()})
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def make_agent(cfg: ExperimentConfig, obs_dim: int, n_actions: int, rng: np.random.Generator):
    if cfg.safe:
        return SafeAcAgent(obs_dim, n_actions, rng, hidden=cfg.hidden, lr=cfg.lr, gamma=cfg.gamma, tau=cfg.tau,
                           alpha_risk=cfg.alpha_risk, cost_budget=cfg.resolved_cost_budget,
                           lam_init=cfg.lam_init, lam_lr=cfg.lam_lr, logit_l2=cfg.logit_l2)
    tau = cfg.tau if cfg.target_update == "soft" else None
    return DqnAgent(obs_dim, n_actions, rng, hidden=cfg.hidden, lr=cfg.lr, gamma=cfg.gamma, tau=tau,
                    target_period=cfg.target_period)


def build_ensemble(cfg: ExperimentConfig, obs_dim: int, n_actions: int) -> tuple[Ensemble, list]:
    init_rngs = [make_rng(cfg.seed, STREAM_INIT + i) for i in range(cfg.effective_n_agents)]
    agents = [make_agent(cfg, obs_dim, n_actions, r) for r in init_rngs]
    ens = Ensemble(agents, cfg.reset_interval(), beta=cfg.beta, kappa=cfg.kappa,
                   mode="safe" if cfg.safe else "reward", reset_depth=cfg.depth,
                   temperature_mode=cfg.temperature_mode)
    return ens, init_rngs


def evaluate(ens: Ensemble, cfg: ExperimentConfig, env_step: int) -> tuple[float, float, float]:
    """Greedy members, composed policy, fresh env and RNG; returns (mean, std, mean cost)."""
    env = make_env(cfg.env_spec())
    rng = make_rng(cfg.seed, STREAM_EVAL + env_step)
    returns, costs = [], []
    for _ in range(cfg.eval_episodes):
        obs = env.reset(rng)
        total, cost = 0.0, 0.0
        while True:
            action, _ = ens.select_action(obs, rng, greedy=True)
            res = env.step(action)
            total += res.reward
            cost += res.cost
            obs = res.next_obs
            if res.done or res.truncated:
                break
        returns.append(total)
        costs.append(cost)
    return float(np.mean(returns)), float(np.std(returns)), float(np.mean(costs))


def run_experiment(cfg: ExperimentConfig, progress=None) -> MetricsLog:
    """Train and evaluate one configuration. Deterministic given ``cfg``.

    A non-finite loss stops the run; the returned log then has
    ``diverged=True`` and the rows written so far.
    """
    started = time.perf_counter()
    env = make_env(cfg.env_spec())
    ens, init_rngs = build_ensemble(cfg, env.obs_dim, env.n_actions)
    n = ens.n
    buf = ReplayBuffer(min(cfg.buffer_capacity, cfg.total_env_steps), env.obs_dim)
    act_rng = make_rng(cfg.seed, STREAM_ACT)
    env_rng = make_rng(cfg.seed, STREAM_ENV)
    replay_rng = make_rng(cfg.seed, STREAM_REPLAY)
    update_rng = make_rng(cfg.seed, STREAM_UPDATE)
    schedule = EpsilonSchedule(cfg.eps_start, cfg.eps_end, cfg.eps_decay_steps)

    metrics = MetricsLog(cfg, updates_per_agent=[0] * n)
    if cfg.trace_selection:
        metrics.p_trace = np.zeros((cfg.total_env_steps, n))
        metrics.chosen_trace = np.zeros(cfg.total_env_steps, dtype=np.int64)
    p_sum = np.zeros(n)
    p_count = 0
    loss_sum = 0.0
    loss_count = 0

    obs = env.reset(env_rng)
    try:
        for t in range(1, cfg.total_env_steps + 1):
            action, sel = ens.select_action(obs, act_rng, schedule.value(t - 1))
            res = env.step(action)
            buf.add(obs, action, res.reward, res.cost, res.next_obs, res.done)
            metrics.cumulative_cost += res.cost
            p_sum += sel.p
            p_count += 1
            if metrics.p_trace is not None:
                metrics.p_trace[t - 1] = sel.p
                metrics.chosen_trace[t - 1] = sel.chosen
            if res.done or res.truncated:
                metrics.episodes += 1
                obs = env.reset(env_rng)
            else:
                obs = res.next_obs

            for _ in range(updates_due(cfg.replay_ratio, t - cfg.learning_starts)):
                shared = buf.sample(cfg.batch_size, replay_rng) if cfg.shared_minibatch else None
                for i, agent in enumerate(ens.agents):
                    batch = shared if shared is not None else buf.sample(cfg.batch_size, replay_rng)
                    loss = agent.update(batch, update_rng)
                    metrics.updates_per_agent[i] += 1
                    loss_sum += loss
                    loss_count += 1

            event = ens.maybe_reset(t, init_rngs)
            if event is not None:
                metrics.reset_events.append(event)
            is_eval = t % cfg.eval_every == 0
            if event is None and not is_eval:
                continue
            row = {
                "env_step": t,
                "eval_return_mean": None,
                "eval_return_std": None,
                "eval_cost_mean": None,
                "train_loss": loss_sum / loss_count if loss_count else None,
                "reset_agent_index": event.agent_index if event else -1,
                **{f"p_select_{i}": float(p_sum[i] / p_count) if p_count else None for i in range(n)},
                "cumulative_train_cost": metrics.cumulative_cost,
            }
            if is_eval:
                mean, std, cost = evaluate(ens, cfg, t)
                row.update(eval_return_mean=mean, eval_return_std=std, eval_cost_mean=cost)
                metrics.eval_steps.append(t)
                metrics.eval_returns.append(mean)
                metrics.eval_costs.append(cost)
                if progress is not None:
                    progress(f"[{cfg.algorithm} seed={cfg.seed}] step {t}: return {mean:.3f} cost {cost:.2f}")
            metrics.rows.append(row)
            p_sum[:] = 0.0
            p_count = 0
            loss_sum, loss_count = 0.0, 0
    except (DivergenceError, NonFiniteError, FloatingPointError) as exc:
        metrics.diverged = True
        metrics.message = f"diverged at step {t}: {exc}"
        log.warning(metrics.message)
    metrics.wall_seconds = time.perf_counter() - started
    return metrics


def write_run(metrics: MetricsLog, out_dir: Path, stem: str = "run") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.csv").write_text(metrics.to_csv())
    (out_dir / f"{stem}_summary.json").write_text(json.dumps(metrics.summary(), indent=2, sort_keys=True))
    if metrics.p_trace is not None:
        lines = ["env_step,chosen," + ",".join(f"p_select_{i}" for i in range(metrics.p_trace.shape[1]))]
        for t, (row, c) in enumerate(zip(metrics.p_trace, metrics.chosen_trace), start=1):
            lines.append(f"{t},{c}," + ",".join(repr(float(x)) for x in row))
        (out_dir / f"{stem}_selection.csv").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# sweeps

SWEEP_AXES = ("algorithm", "replay_ratio", "beta", "n_agents")


@dataclass
class SweepCell:
    settings: dict
    seeds: list[int]
    final_returns: dict[int, float] = field(default_factory=dict)
    cumulative_costs: dict[int, float] = field(default_factory=dict)
    collapse_max: dict[int, float] = field(default_factory=dict)
    collapse_mean: dict[int, float] = field(default_factory=dict)
    wall_seconds: float = 0.0
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def ok_seeds(self) -> list[int]:
        return sorted(self.final_returns)

    def aggregate(self) -> dict:
        ok = self.ok_seeds
        mean = lambda d: math.fsum(d[s] for s in ok) / len(ok) if ok else float("nan")  # noqa: E731
        return {
            **self.settings,
            "seeds": len(self.seeds),
            "failed": len(self.failures),
            "final_iqm": iqm([self.final_returns[s] for s in ok]) if ok else float("nan"),
            "mean_cumulative_cost": mean(self.cumulative_costs),
            "collapse_max": max((self.collapse_max[s] for s in ok), default=float("nan")),
            "collapse_mean": mean(self.collapse_mean),
        }


def _run_one(cfg: ExperimentConfig) -> MetricsLog:
    return run_experiment(cfg)


def sweep(template: ExperimentConfig, axes: dict, workers: int = 1, out_dir: Path | None = None,
          progress=None) -> list[SweepCell]:
    """Run the cartesian product of ``axes`` (``seeds`` always included).

    Per-cell results aggregate the seeds with the IQM.  A failing run marks its
    cell but does not stop the sweep.
    """
    seeds = list(axes.get("seeds") or [template.seed])
    unknown = set(axes) - {"seeds", *SWEEP_AXES}
    if unknown:
        raise ValueError(f"unknown sweep axes {sorted(unknown)}")
    names = [a for a in SWEEP_AXES if axes.get(a)]
    values = [list(axes[a]) for a in names]
    cells: list[SweepCell] = []
    jobs: list[tuple[int, int, ExperimentConfig | Exception]] = []
    for combo in itertools.product(*values):
        settings = dict(zip(names, combo))
        cell = SweepCell(settings, seeds)
        cells.append(cell)
        for s in seeds:
            try:
                cfg = replace(template, seed=int(s), **settings)
            except (ValueError, TypeError) as exc:
                cfg = exc
            jobs.append((len(cells) - 1, int(s), cfg))

    runnable = [(c, s, cfg) for c, s, cfg in jobs if isinstance(cfg, ExperimentConfig)]
    for c, s, cfg in jobs:
        if not isinstance(cfg, ExperimentConfig):
            cells[c].failures[s] = f"invalid config: {cfg}"

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, [cfg for _, _, cfg in runnable]))
    else:
        results = []
        for _, _, cfg in runnable:
            results.append(run_experiment(cfg))
            if progress is not None:
                progress(f"finished {cfg.algorithm} seed={cfg.seed} final={results[-1].final_return:.3f}")

    for (c, s, cfg), metrics in zip(runnable, results):
        cell = cells[c]
        cell.wall_seconds += metrics.wall_seconds
        if metrics.diverged:
            cell.failures[s] = metrics.message
        else:
            col = metrics.collapse()
            cell.final_returns[s] = metrics.final_return
            cell.cumulative_costs[s] = metrics.cumulative_cost
            cell.collapse_max[s] = col.max
            cell.collapse_mean[s] = col.mean
        if out_dir is not None:
            write_run(metrics, out_dir / f"cell_{c:03d}", stem=f"seed_{s}")

    if out_dir is not None:
        write_sweep_report(cells, out_dir, template)
    return cells


def write_sweep_report(cells: list[SweepCell], out_dir: Path, template: ExperimentConfig | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [cell.aggregate() for cell in cells]
    keys = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _fmt(v) for k, v in r.items()})
    (out_dir / "report.csv").write_text(buf.getvalue())
    for i, (cell, agg) in enumerate(zip(cells, rows)):
        summary = {
            "cell": agg,
            "config": {**asdict(template), **cell.settings} if template is not None else None,
            "final_returns": {str(k): v for k, v in sorted(cell.final_returns.items())},
            "cumulative_costs": {str(k): v for k, v in sorted(cell.cumulative_costs.items())},
            "failures": {str(k): v for k, v in sorted(cell.failures.items())},
            "wall_seconds": cell.wall_seconds,
        }
        cell_dir = out_dir / f"cell_{i:03d}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        (cell_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
