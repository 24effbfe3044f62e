"""Command-line entry point.

    rdelab run cfg.conf --out out/ --seed 3
    rdelab sweep cfg.conf --workers 2
    rdelab oracle cfg.conf
    rdelab aggregate out/
    rdelab emit-plot-data out/

Config files are flat ``key = value`` lines with ``#`` comments.  Keys are
ExperimentConfig field names plus the sweep axes ``sweep_seeds``,
``sweep_algorithm``, ``sweep_replay_ratio``, ``sweep_beta`` and
``sweep_n_agents``.
"""

from __future__ import annotations

import argparse
import ast
import csv
import io
import json
import math
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .envs import to_tabular, value_iteration
from .harness import (
    ExperimentConfig,
    collapse_metric,
    iqm,
    run_experiment,
    sweep,
    write_run,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
SWEEP_KEYS = {"sweep_seeds": "seeds", "sweep_algorithm": "algorithm", "sweep_replay_ratio": "replay_ratio",
              "sweep_beta": "beta", "sweep_n_agents": "n_agents"}
RESOLVED_NAME = "config.resolved"


class ConfigError(ValueError):
    pass


def _parse_value(raw: str):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if text.startswith("["):
        if not text.endswith("]"):
            raise ValueError("unterminated list")
        inner = text[1:-1].strip()
        return [_parse_value(part) for part in inner.split(",")] if inner else []
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if not text or any(c in text for c in "[]=,\"'"):
            raise ValueError(f"cannot parse value {raw!r}") from None
        return text


def parse_config_text(text: str) -> dict:
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: missing key")
        try:
            out[key] = _parse_value(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return out


_DEFAULTS = {f.name: f.default for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    default = _DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
                raise TypeError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise TypeError
            return float(value)
        if isinstance(default, tuple):
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise TypeError
            return tuple(value)
        return str(value)
    except TypeError:
        raise ConfigError(f"{key}: bad value {value!r} (expected {type(default).__name__})") from None


def build_config(raw: dict, seed: int | None = None) -> tuple[ExperimentConfig, dict]:
    """Turn parsed key/values into a config plus sweep axes; errors name the key."""
    kwargs, axes = {}, {}
    for key, value in raw.items():
        if key in SWEEP_KEYS:
            vals = value if isinstance(value, list) else [value]
            if key in ("sweep_seeds", "sweep_n_agents"):
                vals = [_coerce("seed", v) for v in vals]
            axes[SWEEP_KEYS[key]] = vals
        elif key in _DEFAULTS:
            kwargs[key] = _coerce(key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if seed is not None:
        kwargs["seed"] = seed
    try:
        cfg = ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg, axes


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def resolved_text(cfg: ExperimentConfig, axes: dict | None = None) -> str:
    lines = [f"{k} = {_format_value(v)}" for k, v in asdict(cfg).items()]
    inverse = {v: k for k, v in SWEEP_KEYS.items()}
    for name, vals in (axes or {}).items():
        lines.append(f"{inverse[name]} = {_format_value(list(vals))}")
    return "\n".join(lines) + "\n"


def load_config(path: str, seed: int | None = None) -> tuple[ExperimentConfig, dict]:
    return build_config(parse_config_text(Path(path).read_text()), seed)


# ---------------------------------------------------------------------------
# commands


def cmd_run(args, say) -> int:
    cfg, _ = load_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(resolved_text(cfg))
    metrics = run_experiment(cfg, progress=say)
    write_run(metrics, out)
    if metrics.diverged:
        print(f"error: {metrics.message}", file=sys.stderr)
        return EXIT_DIVERGED
    say(f"final return {metrics.final_return:.4f}, cumulative cost {metrics.cumulative_cost:g}, "
        f"collapse max {metrics.collapse().max:.3f}")
    return EXIT_OK


def cmd_sweep(args, say) -> int:
    cfg, axes = load_config(args.config, args.seed)
    if args.seed is not None:
        axes["seeds"] = [args.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(resolved_text(cfg, axes))
    cells = sweep(cfg, axes, workers=args.workers, out_dir=out, progress=say)
    for cell in cells:
        agg = cell.aggregate()
        say(" ".join(f"{k}={v}" for k, v in agg.items()))
    return EXIT_DIVERGED if any(cell.failures for cell in cells) else EXIT_OK


def cmd_oracle(args, say) -> int:
    cfg, _ = load_config(args.config, args.seed)
    try:
        mdp = to_tabular(cfg.env_spec())
    except ValueError as exc:
        raise ConfigError(f"env_kind: {exc}") from None
    q = value_iteration(mdp, cfg.gamma, tol=1e-12)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["state", *[f"q_{a}" for a in range(q.shape[1])], "terminal"])
    for s, row in enumerate(q):
        writer.writerow([s, *[repr(float(v)) for v in row], int(mdp.terminal[s])])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


def _read_rows(path: Path) -> list[dict]:
    with path.open(newline="") as fh:
        return list(csv.DictReader(fh))


def _run_csvs(root: Path) -> list[Path]:
    found = []
    for p in sorted(root.rglob("*.csv")):
        with p.open(newline="") as fh:
            header = next(csv.reader(fh), [])
        if "eval_return_mean" in header and "reset_agent_index" in header:
            found.append(p)
    return found


def _run_settings(csv_path: Path) -> dict:
    summary = csv_path.with_name(csv_path.stem + "_summary.json")
    if summary.exists():
        return json.loads(summary.read_text()).get("config", {})
    return {}


def _num(x: str) -> float | None:
    return float(x) if x not in ("", None) else None


def cmd_aggregate(args, say) -> int:
    root = Path(args.csv_dir)
    runs = _run_csvs(root)
    if not runs:
        raise OSError(f"no run CSVs under {root}")
    per_run, groups = [], {}
    for path in runs:
        rows = _read_rows(path)
        conf = _run_settings(path)
        evals = [(int(r["env_step"]), _num(r["eval_return_mean"])) for r in rows if r["eval_return_mean"] != ""]
        resets = [int(r["env_step"]) for r in rows if int(r["reset_agent_index"]) >= 0]
        k = int(conf.get("final_evals", 1))
        tail = [v for _, v in evals[-k:]]
        final = math.fsum(tail) / len(tail) if tail else float("nan")
        col = collapse_metric([s for s, _ in evals], [v for _, v in evals], resets,
                              int(conf.get("collapse_window", 10))) if evals else None
        costs = [_num(r.get("cumulative_train_cost", "")) for r in rows]
        costs = [c for c in costs if c is not None]
        rec = {"run": str(path.relative_to(root)), "final_return": final,
               "collapse_max": col.max if col else float("nan"),
               "collapse_mean": col.mean if col else float("nan"),
               "cumulative_cost": costs[-1] if costs else float("nan"), "resets": len(resets)}
        per_run.append(rec)
        groups.setdefault(str(path.parent.relative_to(root)), []).append(rec)
    out_rows = []
    for group, recs in sorted(groups.items()):
        finals = [r["final_return"] for r in recs if not math.isnan(r["final_return"])]
        out_rows.append({"group": group, "runs": len(recs), "final_iqm": iqm(finals) if finals else float("nan"),
                         "collapse_max": max(r["collapse_max"] for r in recs),
                         "mean_cumulative_cost": math.fsum(r["cumulative_cost"] for r in recs) / len(recs)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_dicts(out / "aggregate_runs.csv", per_run)
    _write_dicts(out / "aggregate.csv", out_rows)
    for row in out_rows:
        print(" ".join(f"{k}={_format_value(v)}" for k, v in row.items()))
    return EXIT_OK


def cmd_emit_plot_data(args, say) -> int:
    root = Path(args.csv_dir)
    runs = _run_csvs(root)
    if not runs:
        raise OSError(f"no run CSVs under {root}")
    long_rows = []
    for path in runs:
        name = str(path.relative_to(root))
        for r in _read_rows(path):
            for metric, value in r.items():
                if metric == "env_step" or value == "":
                    continue
                long_rows.append({"run": name, "env_step": r["env_step"], "metric": metric, "value": value})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_dicts(out / "plot_data.csv", long_rows, ["run", "env_step", "metric", "value"])
    say(f"wrote {len(long_rows)} rows to {out / 'plot_data.csv'}")
    return EXIT_OK


def _write_dicts(path: Path, rows: list[dict], keys: list[str] | None = None) -> None:
    keys = keys or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: _format_value(v) for k, v in r.items()})
    path.write_text(buf.getvalue())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="./out", help="output directory (default ./out)")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--quiet", action="store_true", help="suppress progress lines")

    parser = argparse.ArgumentParser(prog="rdelab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="train and evaluate one configuration")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", parents=[common], help="run the cartesian product of the sweep axes")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("oracle", parents=[common], help="dump Q* from value iteration")
    p.add_argument("config")
    p.set_defaults(func=cmd_oracle)
    p = sub.add_parser("aggregate", parents=[common], help="recompute IQM and collapse from stored CSVs")
    p.add_argument("csv_dir")
    p.set_defaults(func=cmd_aggregate)
    p = sub.add_parser("emit-plot-data", parents=[common], help="long-format CSV for external plotting")
    p.add_argument("csv_dir")
    p.set_defaults(func=cmd_emit_plot_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    def say(msg: str) -> None:
        if not args.quiet:
            print(msg, file=sys.stderr, flush=True)

    try:
        return args.func(args, say)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
