"""Command-line front end: configuration, experiment orchestration, CSV and SVG output.

Every subcommand writes into ``<out>/<env>/<subcommand>/`` and leaves a
``manifest.json`` there holding the full configuration, seed, config hash,
package versions and the sha256 of each file written.  Configuration is a
JSON object with flat dotted keys (see ``seqstop defaults``); ``--set
key=value`` overrides single keys.

Exit codes: 0 success, 2 configuration error, 3 missing or stale dependency,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__, backward_induction, boundary_opt, example1, pg, qlearn
from .core import ConfigError, NumericalError, UsageError
from .evaluation import constant_decisions, evaluate_decisions, stop_immediately_decisions
from .example1 import Ex1Config
from .example2 import Ex2Config
from .forward_sim import (DatasetError, config_hash, ex2_grid, load_dataset, meta_path, run_forward,
                          save_dataset)

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 2, 3, 4
ENVS = ("example1", "example2")
SUBCOMMANDS = ("simulate", "dp", "boundary", "qlearn", "dqn", "pg", "oracle", "report")
MANIFEST = "manifest.json"


class DependencyError(RuntimeError):
    """An input produced by another subcommand is missing or does not match."""


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class Key:
    default: object
    types: tuple
    doc: str
    choices: tuple = ()


def _kind(value) -> tuple:
    if isinstance(value, bool):
        return (bool,)
    if isinstance(value, int):
        return (int,)
    if isinstance(value, float):
        return (float,)
    if isinstance(value, (list, tuple)):
        return (list,)
    return (type(value),)


def _env_keys(prefix: str, cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        d = f.default
        d = list(d) if isinstance(d, tuple) else d
        out[f"{prefix}.{f.name}"] = Key(d, _kind(d), f"{cls.__name__}.{f.name}")
    return out


def _solver_keys(prefix: str, cls, skip=()) -> dict:
    return {k: v for k, v in _env_keys(prefix, cls).items() if k.split(".", 1)[1] not in skip}


SCHEMA: dict[str, Key] = {
    "config_version": Key(CONFIG_VERSION, (int,), "schema version of this configuration"),
    "env": Key("example1", (str,), "environment id", ENVS),
    "seed": Key(0, (int,), "master seed for every random stream"),
    "out": Key("runs", (str,), "root output directory"),
    **_env_keys("example1", Ex1Config),
    **_env_keys("example2", Ex2Config),
    "simulate.m_episodes": Key(1000, (int,), "forward-simulated episodes in the shared dataset"),
    "dp.max_iter": Key(100, (int,), "maximum backward-induction sweeps"),
    "dp.change_threshold": Key(0, (int,), "stop sweeping when at most this many cells change"),
    "dp.order": Key(None, (str, type(None)), "sweep order over grid rows; null = per-environment default",
                    ("ascending", "descending", None)),
    "dp.scoring": Key("drawn", (str,), "terminal utility: sampled theta or posterior expectation",
                      ("drawn", "posterior")),
    "boundary.scoring": Key(boundary_opt.DEFAULT_SCORING, (str,), "terminal utility used by the search",
                            ("drawn", "posterior")),
    "boundary.grid_n": Key(None, (int, type(None)), "nodes per parameter axis; null = default grid"),
    "boundary.window": Key("auto", (str, int, type(None)),
                           "fit window in grid steps around the best node; null = global, auto = per env"),
    "qlearn.episodes": Key(200_000, (int,), "tabular training episodes"),
    "qlearn.alpha_power": Key(0.8, (float,), "step size (1 + visits)^-alpha_power"),
    "qlearn.init": Key(0.0, (float,), "initial Q-value"),
    "qlearn.reward": Key("posterior", (str,), "training reward", qlearn.REWARDS),
    "qlearn.epsilon_start": Key(1.0, (float,), "initial exploration rate"),
    "qlearn.epsilon_end": Key(0.05, (float,), "final exploration rate"),
    "qlearn.epsilon_fraction": Key(0.2, (float,), "share of the budget spent decaying epsilon"),
    "qlearn.min_visits": Key(100, (int,), "visits needed for a cell to enter the exact comparison"),
    **_solver_keys("dqn", qlearn.DQNConfig, skip=("epsilon",)),
    "dqn.epsilon_start": Key(1.0, (float,), "initial exploration rate"),
    "dqn.epsilon_end": Key(0.05, (float,), "final exploration rate"),
    "dqn.epsilon_fraction": Key(0.2, (float,), "share of the budget spent decaying epsilon"),
    **_solver_keys("pg", pg.PGConfig),
    "eval.episodes": Key(10_000, (int,), "fresh episodes for final policy evaluation"),
    "eval.seed_offset": Key(1_000_003, (int,), "added to the seed for the evaluation episodes"),
}


def defaults() -> dict:
    return {k: v.default for k, v in SCHEMA.items()}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _check(key: str, value):
    spec = SCHEMA.get(key)
    if spec is None:
        raise ConfigError(f"{key}: unknown configuration key")
    ok = any(isinstance(value, t) and not (t in (int, float) and isinstance(value, bool)) for t in spec.types)
    if not ok and float in spec.types and isinstance(value, int) and not isinstance(value, bool):
        value, ok = float(value), True
    if not ok:
        names = " or ".join("null" if t is type(None) else t.__name__ for t in spec.types)
        raise ConfigError(f"{key}: expected {names}, got {type(value).__name__} {value!r}")
    if isinstance(value, list) and not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} is not one of {list(spec.choices)}")
    return value


def parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file (flat or nested JSON, or a manifest), then overrides; validated."""
    cfg = defaults()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "subcommand" in raw and isinstance(raw.get("config"), dict):
            raw = raw["config"]
        for k, v in _flatten(raw).items():
            cfg[k] = _check(k, v)
    for text in overrides:
        k, v = parse_override(text)
        cfg[k] = _check(k, v)
    if cfg["config_version"] != CONFIG_VERSION:
        raise ConfigError(f"config_version: unsupported version {cfg['config_version']}")
    env_config(cfg)
    solver_configs(cfg)
    return cfg


def _section(cfg: dict, prefix: str) -> dict:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def env_config(cfg: dict):
    env = cfg["env"]
    cls = Ex1Config if env == "example1" else Ex2Config
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in _section(cfg, env).items()}
    try:
        return cls(**values)
    except (ConfigError, ValueError, TypeError) as exc:
        raise ConfigError(f"{env}: {exc}") from exc


def solver_configs(cfg: dict) -> dict:
    """Build and validate every solver's options from the flat configuration."""
    try:
        q = _section(cfg, "qlearn")
        tab = qlearn.TabularOptions(
            episodes=q["episodes"], alpha_power=q["alpha_power"], init=q["init"], reward=q["reward"],
            epsilon=qlearn.EpsilonSchedule(q["epsilon_start"], q["epsilon_end"], q["epsilon_fraction"]))
        d = _section(cfg, "dqn")
        eps = qlearn.EpsilonSchedule(d.pop("epsilon_start"), d.pop("epsilon_end"), d.pop("epsilon_fraction"))
        d["hidden"] = tuple(int(h) for h in d["hidden"])
        dqn = qlearn.DQNConfig(epsilon=eps, **d)
        p = _section(cfg, "pg")
        p["hidden"] = tuple(int(h) for h in p["hidden"])
        p["head_bias"] = tuple(float(b) for b in p["head_bias"])
        if len(p["head_bias"]) != 3:
            raise ValueError("pg.head_bias must have three entries")
        pgc = pg.PGConfig(**p)
        dp = backward_induction.SolveOptions(cfg["dp.max_iter"], cfg["dp.change_threshold"], cfg["dp.order"],
                                             cfg["dp.scoring"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("simulate.m_episodes", "eval.episodes", "qlearn.episodes", "dp.max_iter"):
        if cfg[key] < 1:
            raise ConfigError(f"{key}: must be positive")
    if isinstance(cfg["boundary.window"], str) and cfg["boundary.window"] != "auto":
        raise ConfigError("boundary.window: expected an integer, null or 'auto'")
    return {"tabular": tab, "dqn": dqn, "pg": pgc, "dp": dp}


# ---------------------------------------------------------------- artifacts

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_dir(cfg: dict, sub: str) -> Path:
    return Path(cfg["out"]) / cfg["env"] / sub


def _run_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(directory: Path, sub: str, cfg: dict, files, inputs=()) -> Path:
    """Manifest with everything needed to reproduce the directory; no timestamps."""
    directory = Path(directory)
    manifest = {
        "subcommand": sub,
        "env": cfg["env"],
        "seed": cfg["seed"],
        "config_hash": config_hash(env_config(cfg)),
        "run_hash": _run_hash(cfg),
        "config": cfg,
        "versions": {"seqstop": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "files": {Path(f).name: _sha256(Path(f)) for f in sorted(files, key=lambda p: Path(p).name)},
        "inputs": {str(Path(f)): _sha256(Path(f)) for f in inputs},
    }
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def dataset_path(cfg: dict) -> Path:
    return run_dir(cfg, "simulate") / "dataset.csv"


def require_dataset(cfg: dict):
    path = dataset_path(cfg)
    if not path.exists() or not meta_path(path).exists():
        raise DependencyError(f"dataset {path} not found; produce it with `seqstop simulate` "
                              f"using the same configuration")
    try:
        return load_dataset(path, expect_config=env_config(cfg)), path
    except DatasetError as exc:
        raise DependencyError(f"{exc}; rerun `seqstop simulate` with this configuration") from exc


def _eval_dataset(cfg: dict, workers: int):
    return run_forward(env_config(cfg), cfg["eval.episodes"], cfg["seed"] + cfg["eval.seed_offset"],
                       workers=workers)


def _value_rows(name, pv, baseline=None):
    row = [name, pv.mean, pv.se]
    if baseline is not None:
        d, se = pv.paired_diff(baseline)
        row += [d, se]
    else:
        row += ["", ""]
    return row


EVAL_COLUMNS = ("policy", "mean", "se", "diff_vs_stop_immediately", "diff_se")


def _baselines(ds):
    stop_now = evaluate_decisions(ds, stop_immediately_decisions(ds))
    never = evaluate_decisions(ds, constant_decisions(ds, 0))
    stop1 = evaluate_decisions(ds, constant_decisions(ds, 1))
    return stop_now, [_value_rows("stop_immediately", stop_now), _value_rows("never_stop", never, stop_now),
                      _value_rows("always_stop1", stop1, stop_now)]


# ---------------------------------------------------------------- subcommands

def cmd_simulate(cfg: dict, workers: int) -> list:
    d = run_dir(cfg, "simulate")
    ds = run_forward(env_config(cfg), cfg["simulate.m_episodes"], cfg["seed"], workers=workers)
    csv_path, meta = save_dataset(ds, d / "dataset.csv")
    write_manifest(d, "simulate", cfg, [csv_path, meta])
    return [csv_path, meta]


def cmd_dp(cfg: dict, workers: int) -> list:
    ds, src = require_dataset(cfg)
    d = run_dir(cfg, "dp")
    gvp = backward_induction.solve(ds, env_config(cfg), options=solver_configs(cfg)["dp"])
    table = write_csv(d / "value_table.csv", backward_induction.TABLE_COLUMNS, gvp.table_rows())
    trace = write_csv(d / "trace.csv", ("sweep", "changed"), enumerate(gvp.trace, start=1))
    svg = d / "policy.svg"
    svg.write_text(render_heatmap(table, "action", row_label=ds.grid.row_name, col_label=ds.grid.col_name))
    files = [table, trace, svg]
    write_manifest(d, "dp", cfg, files, inputs=[src])
    return files


def cmd_boundary(cfg: dict, workers: int) -> list:
    ds, src = require_dataset(cfg)
    d = run_dir(cfg, "boundary")
    nodes = boundary_opt.default_grid(ds.env_id, cfg["boundary.grid_n"])
    try:
        gs, fit, opt, pv = boundary_opt.optimise(ds, env_config(cfg), nodes, workers, cfg["boundary.scoring"],
                                                  cfg["boundary.window"])
    except boundary_opt.RankDeficientDesign as exc:
        raise ConfigError(f"boundary.grid_n / boundary.window: {exc}") from exc
    grid = write_csv(d / "grid.csv", (*gs.names, "value", "se"),
                     (tuple(p) + (v, s) for p, v, s in zip(gs.params, gs.value, gs.se)))
    surface = write_csv(d / "surface.csv", ("term", "index", "coefficient"), fit.surface.coefficient_rows())
    se = fit.diagnostics.get("optimum_se", [float("nan")] * len(gs.names))
    rows = [(f"{n}_star", float(v)) for n, v in zip(gs.names, fit.optimum)]
    rows += [(f"{n}_star_se", float(s)) for n, s in zip(gs.names, se)]
    rows += [("value", pv.mean), ("value_se", pv.se), ("fallback", int(fit.fallback)),
             ("negative_definite", int(fit.diagnostics["negative_definite"])),
             ("n_fit_nodes", fit.diagnostics["n_fit_nodes"]),
             ("best_node_value", fit.diagnostics["best_node_value"])]
    rows += [(f"best_node_{n}", float(v)) for n, v in zip(gs.names, fit.diagnostics["best_node"])]
    if "reason" in fit.diagnostics:
        rows.append(("fallback_reason", fit.diagnostics["reason"]))
    report = write_csv(d / "report.csv", ("key", "value"), rows)
    files = [grid, surface, report]
    write_manifest(d, "boundary", cfg, files, inputs=[src])
    return files


def _require_example1(cfg: dict, sub: str) -> Ex1Config:
    config = env_config(cfg)
    if not isinstance(config, Ex1Config):
        raise ConfigError(f"env: `{sub}` needs the finite example1 state space, got {cfg['env']!r}")
    return config


def cmd_oracle(cfg: dict, workers: int) -> list:
    config = _require_example1(cfg, "oracle")
    d = run_dir(cfg, "oracle")
    try:
        sol = example1.exact_dp(config)
    except MemoryError as exc:
        raise ConfigError(f"example1.t_max: {exc}") from exc
    rows = ((t, k, *sol.q[t, k], int(sol.policy[t, k]))
            for t in range(config.t_max + 1) for k in range(t + 1))
    table = write_csv(d / "exact.csv", ("t", "k", "u_continue", "u_stop1", "u_stop2", "action"), rows)
    summary = write_csv(d / "summary.csv", ("key", "value"), [("optimal_value", sol.optimal_value)])
    files = [table, summary]
    write_manifest(d, "oracle", cfg, files)
    return files


def cmd_qlearn(cfg: dict, workers: int) -> list:
    config = _require_example1(cfg, "qlearn")
    d = run_dir(cfg, "qlearn")
    table = qlearn.run_tabular(config, solver_configs(cfg)["tabular"], cfg["seed"])
    files = [write_csv(d / "q_table.csv", backward_induction.TABLE_COLUMNS, table.table_rows())]
    if (config.t_max + 1) * (config.t_max + 2) // 2 <= example1.MAX_EXACT_CELLS:
        rows = qlearn.lattice_comparison(table, example1.exact_dp(config), cfg["qlearn.min_visits"])
        files.append(write_csv(d / "lattice.csv", ("t", "k", "visits", "max_abs_error", "agrees"), rows))
    ev = _eval_dataset(cfg, workers)
    stop_now, rows = _baselines(ev)
    rows.append(_value_rows("greedy", evaluate_decisions(ev, table.decisions(ev)), stop_now))
    files.append(write_csv(d / "evaluation.csv", EVAL_COLUMNS, rows))
    write_manifest(d, "qlearn", cfg, files)
    return files


def cmd_dqn(cfg: dict, workers: int) -> list:
    config = env_config(cfg)
    d = run_dir(cfg, "dqn")
    dqn = solver_configs(cfg)["dqn"]
    res = qlearn.dqn_train(config, dqn, cfg["seed"], workers)
    d.mkdir(parents=True, exist_ok=True)
    net_path = d / "network.bin"
    res.best.save(net_path)
    files = [net_path, write_csv(d / "trace.csv", ("step", "mean_return", "se", "epsilon", "loss"),
                                 ((p.step, p.mean_return, p.se, p.epsilon, p.loss) for p in res.trace))]
    ev = _eval_dataset(cfg, workers)
    if isinstance(config, Ex1Config):
        grid = ev.grid
        files.append(write_csv(d / "q_table.csv", backward_induction.TABLE_COLUMNS,
                               qlearn.network_table_rows(res.best, grid, config.t_max, res.reward_scale)))
    stop_now, rows = _baselines(ev)
    rows.append(_value_rows("best_checkpoint", qlearn.evaluate_network(res.best, ev), stop_now))
    files.append(write_csv(d / "evaluation.csv", EVAL_COLUMNS, rows))
    write_manifest(d, "dqn", cfg, files)
    return files


def cmd_pg(cfg: dict, workers: int) -> list:
    config = env_config(cfg)
    d = run_dir(cfg, "pg")
    pgc = solver_configs(cfg)["pg"]
    res = pg.train(config, pgc, cfg["seed"], workers)
    d.mkdir(parents=True, exist_ok=True)
    net_path = d / "policy.bin"
    res.best.save(net_path)
    files = [net_path, write_csv(d / "trace.csv", ("batch", "mean_return", "se", "entropy"),
                                 ((p.batch, p.mean_return, p.se, p.entropy) for p in res.trace)),
             write_csv(d / "standardizer.csv", ("component", "loc", "scale"),
                       ((i, float(lo), float(sc)) for i, (lo, sc) in
                        enumerate(zip(res.standardizer.loc, res.standardizer.scale))))]
    if isinstance(config, Ex2Config):
        _, ref = pg.reference_standardizer(config, cfg["seed"], pgc.reference_episodes)
        grid = ex2_grid(ref.summary[..., 0], ref.summary[..., 1])
        regions = pg.extract_regions(res.best, grid, res.standardizer, ref)
        path = d / "regions.csv"
        pg.write_regions(path, regions)
        files.append(path)
    ev = _eval_dataset(cfg, workers)
    stop_now, rows = _baselines(ev)
    rows.append(_value_rows("best_checkpoint_mode", pg.evaluate_mode(res.best, ev, res.standardizer), stop_now))
    files.append(write_csv(d / "evaluation.csv", EVAL_COLUMNS, rows))
    write_manifest(d, "pg", cfg, files)
    return files


# heatmaps rendered by report: (subcommand, table file, style)
REPORT_HEATMAPS = (("dp", "value_table.csv", "action"), ("dp", "value_table.csv", "value"),
                   ("qlearn", "q_table.csv", "action"), ("dqn", "q_table.csv", "action"),
                   ("pg", "regions.csv", "action"))
REPORT_TABLES = (("boundary", "report.csv"), ("oracle", "summary.csv"), ("qlearn", "evaluation.csv"),
                 ("dqn", "evaluation.csv"), ("pg", "evaluation.csv"))


def _verified_runs(cfg: dict) -> dict:
    """Manifests of every finished subcommand, after checking their files are intact."""
    runs = {}
    for sub in SUBCOMMANDS[:-1]:
        mpath = run_dir(cfg, sub) / MANIFEST
        if not mpath.exists():
            continue
        manifest = json.loads(mpath.read_text())
        for name, digest in manifest["files"].items():
            f = mpath.parent / name
            if not f.exists():
                raise DependencyError(f"{f} is listed in {mpath} but missing; rerun `seqstop {sub}`")
            if _sha256(f) != digest:
                raise DependencyError(f"{f} no longer matches its manifest; rerun `seqstop {sub}`")
        runs[sub] = manifest
    return runs


def cmd_report(cfg: dict, workers: int) -> list:
    runs = _verified_runs(cfg)
    if not runs:
        raise DependencyError(f"nothing to report under {Path(cfg['out']) / cfg['env']}; run one of "
                              f"{', '.join(SUBCOMMANDS[:-1])} first")
    d = run_dir(cfg, "report")
    d.mkdir(parents=True, exist_ok=True)
    files = []
    rows = []
    for sub, name in REPORT_TABLES:
        if sub not in runs or name not in runs[sub]["files"]:
            continue
        with open(run_dir(cfg, sub) / name, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            for r in reader:
                rows.append((sub, name, r[0], ";".join(f"{h}={v}" for h, v in zip(header[1:], r[1:]))))
    files.append(write_csv(d / "summary.csv", ("subcommand", "file", "key", "values"), rows))
    for sub, name, style in REPORT_HEATMAPS:
        if sub not in runs or name not in runs[sub]["files"]:
            continue
        svg = d / f"{sub}_{Path(name).stem}_{style}.svg"
        svg.write_text(render_heatmap(run_dir(cfg, sub) / name, style))
        files.append(svg)
    inputs = [run_dir(cfg, sub) / MANIFEST for sub in sorted(runs)]
    write_manifest(d, "report", cfg, files, inputs=inputs)
    return files


COMMANDS = {"simulate": cmd_simulate, "dp": cmd_dp, "boundary": cmd_boundary, "qlearn": cmd_qlearn,
            "dqn": cmd_dqn, "pg": cmd_pg, "oracle": cmd_oracle, "report": cmd_report}


# ---------------------------------------------------------------- SVG heatmaps

class SchemaError(ValueError):
    pass


HEATMAP_STYLES = ("action", "value")
# Continue, Stop1, Stop2; unvisited cells are drawn in PALETTE_EMPTY
ACTION_PALETTE = ("#f2c14e", "#3c6e9f", "#c8553d")
ACTION_NAMES = ("Continue", "Stop1", "Stop2")
PALETTE_EMPTY = "#e6e6e6"
CELL = 10
MARGIN = 48


def _read_table(path) -> tuple[tuple, list]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader, ()))
        rows = list(reader)
    if header == backward_induction.TABLE_COLUMNS:
        kind = "value"
    elif header == pg.REGION_COLUMNS:
        kind = "region"
    else:
        raise SchemaError(f"{path}: header {list(header)} matches neither the value-table nor the region schema")
    if not rows:
        raise SchemaError(f"{path}: table has no rows")
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise SchemaError(f"{path}: row {i} has {len(r)} fields, expected {len(header)}")
    return kind, [dict(zip(header, r)) for r in rows]


def _value_color(v: float, lo: float, hi: float) -> str:
    # white to dark blue
    f = 0.0 if hi <= lo else (v - lo) / (hi - lo)
    r = round(247 - f * (247 - 8))
    g = round(251 - f * (251 - 48))
    b = round(255 - f * (255 - 107))
    return f"#{r:02x}{g:02x}{b:02x}"


def render_heatmap(table_csv, style: str = "action", row_label: str = "row", col_label: str = "column") -> str:
    """Deterministic SVG of a value table or region table; rows run bottom to top."""
    if style not in HEATMAP_STYLES:
        raise ValueError(f"style must be one of {HEATMAP_STYLES}")
    kind, rows = _read_table(table_csv)
    if style == "value" and kind != "value":
        raise SchemaError(f"{table_csv}: value style needs the value-table schema")
    try:
        nr = max(int(r["row"]) for r in rows) + 1
        nc = max(int(r["col"]) for r in rows) + 1
        cells = []
        for r in rows:
            visited = int(r["visited"]) > 0 if kind == "region" else int(r["count"]) > 0
            action = int(r["action"])
            best = max(float(r[c]) for c in ("u_continue", "u_stop1", "u_stop2")) if kind == "value" else 0.0
            cells.append((int(r["row"]), int(r["col"]), visited and action >= 0, action, best))
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"{table_csv}: malformed value ({exc})") from exc
    finite = [c[4] for c in cells if c[2] and np.isfinite(c[4])]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    width, height = 2 * MARGIN + nc * CELL, 2 * MARGIN + nr * CELL + 24
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="#ffffff"/>']
    for row, col, ok, action, best in sorted(cells):
        x = MARGIN + col * CELL
        y = MARGIN + (nr - 1 - row) * CELL
        if not ok:
            fill = PALETTE_EMPTY
        elif style == "action":
            fill = ACTION_PALETTE[action]
        else:
            fill = _value_color(best, lo, hi) if np.isfinite(best) else PALETTE_EMPTY
        out.append(f'<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}"/>')
    plot_bottom = MARGIN + nr * CELL
    out.append(f'<text x="{MARGIN + nc * CELL / 2:.1f}" y="{plot_bottom + 20}" font-size="12" '
               f'text-anchor="middle">{col_label} (bins 0-{nc - 1})</text>')
    out.append(f'<text x="14" y="{MARGIN + nr * CELL / 2:.1f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 14 {MARGIN + nr * CELL / 2:.1f})">{row_label} (bins 0-{nr - 1})</text>')
    if style == "action":
        for i, (name, color) in enumerate(zip(ACTION_NAMES, ACTION_PALETTE)):
            lx = MARGIN + i * 90
            out.append(f'<rect x="{lx}" y="{height - 22}" width="10" height="10" fill="{color}"/>')
            out.append(f'<text x="{lx + 14}" y="{height - 13}" font-size="11">{name}</text>')
    else:
        out.append(f'<text x="{MARGIN}" y="{height - 13}" font-size="11">best value {lo:.3f} (light) '
                   f'to {hi:.3f} (dark)</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqstop", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration (flat dotted keys) or a manifest.json")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one key; VALUE is parsed as JSON, else taken as a string")
        p.add_argument("--out", help="output root (same as --set out=...)")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="worker threads for parallel phases (default: machine parallelism)")
    d = sub.add_parser("defaults", help="print every configuration key with its default")
    d.add_argument("--docs", action="store_true", help="include a description of each key")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "defaults":
        body = ({k: {"default": v.default, "doc": v.doc} for k, v in SCHEMA.items()} if args.docs
                else defaults())
        print(json.dumps(body, indent=2))
        return EXIT_OK
    try:
        overrides = list(args.set) + ([f"out={json.dumps(args.out)}"] if args.out else [])
        cfg = load_config(args.config, overrides)
        if args.workers < 1:
            raise ConfigError("--workers: must be at least 1")
        files = COMMANDS[args.command](cfg, args.workers)
    except (ConfigError, UsageError) as exc:
        print(f"seqstop: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"seqstop: dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (NumericalError, FloatingPointError) as exc:
        print(f"seqstop: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    for f in files:
        print(f)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
