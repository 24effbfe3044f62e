"""End-to-end acceptance criteria.

Each test prints (and records for the terminal summary) one PASS/FAIL line.
Runs shared between criteria are cached for the session; a criterion's
runtime is the summed wall time of the runs it needs.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from rdelab.agents import cvar
from rdelab.harness import ExperimentConfig, iqm, reset_interval_for, run_experiment
from rdelab.nn import backward, forward, make_rng, mlp_init, norm_cdf, norm_ppf, softmax

from test_agents import chain_q_error
from test_nn import finite_difference_grads

pytestmark = pytest.mark.acceptance

SEEDS = range(5)

# desk-scale four-rooms regime shared by the collapse, ordering and replay-ratio criteria
FOUR_ROOMS = ExperimentConfig(
    env_kind="four_rooms", env_size=9, max_steps=50, gamma=0.95, total_env_steps=40_000, eval_every=1000,
    eval_episodes=50, final_evals=5, base_reset_interval=16_000, eps_decay_steps=10_000, lr=1e-3,
    batch_size=32, target_update="hard", target_period=200, n_agents=2, beta=50.0, collapse_window=10,
)

# first reset of agent 0 lands at step 12000, then 500 traced selections
SELECTION = replace(FOUR_ROOMS, algorithm="rde", total_env_steps=12_500, eval_every=12_500, eval_episodes=5,
                    base_reset_interval=24_000, eps_decay_steps=4000, beta=300.0, trace_selection=True)

# a step size at which extra updates per environment step start to hurt a single network
REPLAY = replace(FOUR_ROOMS, lr=3e-3)

# tight budget with a slow multiplier: the constraint binds without the multiplier swamping the reward
HAZARD = ExperimentConfig(
    env_kind="hazard_grid", env_size=7, max_steps=50, gamma=0.95, total_env_steps=20_000, eval_every=1000,
    eval_episodes=10, final_evals=5, base_reset_interval=8000, lr=1e-3, hidden=(32, 32), batch_size=32,
    kappa=0.8, beta=50.0, cost_budget=0.25, lam_lr=1e-3,
)


_RUNS: dict = {}


def run(cfg: ExperimentConfig):
    if cfg not in _RUNS:
        _RUNS[cfg] = run_experiment(cfg)
    return _RUNS[cfg]


def runs(template: ExperimentConfig, **kw):
    return [run(replace(template, seed=s, **kw)) for s in SEEDS]


def wall(*groups) -> float:
    return math.fsum(m.wall_seconds for g in groups for m in g)


def test_1_analytic_kernel(report):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    checks = {}
    worst = 0.0
    for _ in range(200):
        logits = rng.uniform(-500, 500, size=int(rng.integers(1, 12)))
        p = softmax(logits)
        worst = max(worst, abs(p.sum() - 1), float(np.max(np.abs(p - softmax(logits + rng.uniform(-1e3, 1e3))))))
    checks["softmax"] = worst < 1e-12 and bool(np.all(p >= 0))
    checks["cvar"] = abs(cvar(1.5, 2.0**2, 0.5) - (1.5 + 0.79788 * 2.0)) < 1e-4 and \
        abs(cvar(0.0, 1.0, 0.5) - 0.7978845608) < 1e-6
    ps = np.concatenate([np.geomspace(1e-6, 0.5, 500), 1 - np.geomspace(1e-6, 0.5, 500)])
    checks["ppf_round_trip"] = max(abs(norm_cdf(norm_ppf(float(q))) - q) for q in ps) < 1e-8
    checks["iqm"] = iqm(range(1, 9)) == 4.5
    checks["reset_interval"] = reset_interval_for(400_000, 2, 2) == 100_000
    elapsed = time.perf_counter() - start
    ok = all(checks.values()) and elapsed < 5
    report(1, ok, f"{checks} runtime {elapsed:.2f}s")
    assert ok


def test_2_gradient_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        dims = [int(d) for d in rng.integers(1, 17, size=int(rng.integers(2, 5)))]
        net = mlp_init(dims, make_rng(trial, 7))
        net.flat[...] += rng.normal(scale=0.1, size=net.flat.size)
        x, og = rng.normal(size=dims[0]), rng.normal(size=dims[-1])
        analytic = backward(net, forward(net, x)[1], og).flat
        numeric = finite_difference_grads(net, x, og)
        err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-2)
        worst = max(worst, float(err.max()))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 10
    report(2, ok, f"max relative error {worst:.2e} runtime {elapsed:.1f}s")
    assert ok


def test_3_dqn_matches_value_iteration(report):
    start = time.perf_counter()
    errors = [chain_q_error(s, n_updates=5000) for s in SEEDS]
    elapsed = time.perf_counter() - start
    ok = all(e < 0.05 for e in errors) and elapsed < 60
    report(3, ok, f"sup errors {[round(e, 4) for e in errors]} runtime {elapsed:.1f}s")
    assert ok


def test_5_selection_dynamics(report):
    sharp = runs(SELECTION)
    flat = runs(SELECTION, beta=0.0)

    def post_reset_p0(m):
        t = next(e.step for e in m.reset_events if e.agent_index == 0)
        return float(m.p_trace[t:t + 500, 0].mean())

    p_sharp = [post_reset_p0(m) for m in sharp]
    p_flat = [post_reset_p0(m) for m in flat]
    elapsed = wall(sharp, flat)
    ok = all(p < 0.2 for p in p_sharp) and all(0.45 <= p <= 0.55 for p in p_flat) and elapsed < 300
    report(5, ok, f"beta=300 mean p0 {[round(p, 3) for p in p_sharp]}; beta=0 {[round(p, 3) for p in p_flat]} "
                  f"runtime {elapsed:.0f}s")
    assert ok


def test_6_collapse_prevention(report):
    sr = runs(FOUR_ROOMS, algorithm="vanilla_reset")
    rde = runs(FOUR_ROOMS, algorithm="rde")
    sr_drop = [m.collapse().max for m in sr]
    rde_drop = [m.collapse().max for m in rde]
    wins = sum(r < s for r, s in zip(rde_drop, sr_drop))
    sr_big = sum(s > 0.5 for s in sr_drop)
    elapsed = wall(sr, rde)
    ok = wins >= 4 and sr_big >= 4 and elapsed < 15 * 60
    report(6, ok, f"max drop SR {[round(x, 3) for x in sr_drop]} RDE {[round(x, 3) for x in rde_drop]}; "
                  f"RDE<SR in {wins}/5, SR>0.5 in {sr_big}/5, runtime {elapsed:.0f}s")
    assert ok


def test_7_ordering(report):
    base = runs(FOUR_ROOMS, algorithm="base")
    sr = runs(FOUR_ROOMS, algorithm="vanilla_reset")
    rde = runs(FOUR_ROOMS, algorithm="rde")
    scores = {name: iqm([m.final_return for m in group]) for name, group in
              (("base", base), ("sr", sr), ("rde", rde))}
    elapsed = wall(base, sr, rde)
    ok = scores["rde"] > scores["sr"] and scores["rde"] > scores["base"] and elapsed < 30 * 60
    report(7, ok, f"final IQM { {k: round(v, 3) for k, v in scores.items()} } runtime {elapsed:.0f}s")
    assert ok


def test_8_replay_ratio_direction(report):
    groups = {(alg, rr): runs(REPLAY, algorithm=alg, replay_ratio=rr)
              for alg in ("base", "rde") for rr in (1.0, 4.0)}
    score = {k: iqm([m.final_return for m in v]) for k, v in groups.items()}
    base_ok = score[("base", 4.0)] <= score[("base", 1.0)]
    rde_ok = score[("rde", 4.0)] >= 0.9 * score[("rde", 1.0)]
    elapsed = wall(*groups.values())
    ok = base_ok and rde_ok and elapsed < 45 * 60
    report(8, ok, f"IQM base rr1 {score[('base', 1.0)]:.3f} rr4 {score[('base', 4.0)]:.3f} (base condition "
                  f"{'met' if base_ok else 'violated'}); RDE rr1 {score[('rde', 1.0)]:.3f} rr4 "
                  f"{score[('rde', 4.0)]:.3f} ({'met' if rde_ok else 'violated'}); runtime {elapsed:.0f}s")
    assert ok


def test_9_safe_rl(report):
    rde = runs(HAZARD, algorithm="rde_safe")
    sr = runs(HAZARD, algorithm="sr_safe")
    cheaper = sum(r.cumulative_cost < s.cumulative_cost for r, s in zip(rde, sr))
    rde_ret = iqm([m.final_return for m in rde])
    sr_ret = iqm([m.final_return for m in sr])
    ret_ok = rde_ret >= sr_ret - 0.1 * abs(sr_ret)
    elapsed = wall(rde, sr)
    ok = cheaper >= 4 and ret_ok and elapsed < 30 * 60
    report(9, ok, f"cumulative cost RDE {[round(m.cumulative_cost) for m in rde]} SR "
                  f"{[round(m.cumulative_cost) for m in sr]} (RDE lower in {cheaper}/5); final return IQM "
                  f"RDE {rde_ret:.3f} SR {sr_ret:.3f}; runtime {elapsed:.0f}s")
    assert ok


def test_10_determinism(report):
    cfgs = [replace(FOUR_ROOMS, algorithm="rde", total_env_steps=3000, seed=11),
            replace(HAZARD, algorithm="rde_safe", total_env_steps=2000, seed=12)]
    same = [run_experiment(c).to_csv() == run_experiment(c).to_csv() for c in cfgs]
    ok = all(same)
    report(10, ok, f"byte-identical CSV on repeat: {same}")
    assert ok


def _ledger_ok(m) -> bool:
    cfg = m.config
    gap = cfg.reset_interval()
    if gap is None:
        return m.reset_events == []
    expected = [(t, i % cfg.effective_n_agents)
                for i, t in enumerate(range(gap, cfg.total_env_steps + 1, gap))]
    logged = [(r["env_step"], r["reset_agent_index"]) for r in m.rows if r["reset_agent_index"] >= 0]
    return [(e.step, e.agent_index) for e in m.reset_events] == expected == logged


def test_4_reset_schedule_ledger(report):
    tiny = ExperimentConfig(env_size=7, max_steps=20, total_env_steps=600, eval_every=200, eval_episodes=2,
                            hidden=(16,), batch_size=8, base_reset_interval=240, eps_decay_steps=300)
    grid = [run(replace(tiny, n_agents=n, replay_ratio=rr, algorithm=alg))
            for n in (2, 4) for rr in (0.5, 1.0, 2.0) for alg in ("rde", "rde_safe")]
    # runs every earlier criterion produced are checked as well; this test is defined last so it sees them
    suite = [m for m in _RUNS.values() if all(m is not g for g in grid)]
    bad = [m.config for m in grid + suite if not _ledger_ok(m)]
    ok = not bad
    report(4, ok, f"{len(grid)} grid runs + {len(suite)} other suite runs checked, {len(bad)} violations")
    assert ok
