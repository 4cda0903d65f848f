"""No-stopping forward simulation shared by every solver.

Each episode is generated from its own ``SeedSpec(master_seed, m)`` stream,
so a dataset is the same whether it is produced serially or split across
workers.  The CSV written by :func:`save_dataset` is the interchange format;
a JSON sidecar carries the configuration, seed, grid and config hash.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import example1, example2
from .core import ConfigError, SeedSpec, STREAM_EPISODE
from .example1 import Ex1Config
from .example2 import Ex2Config

CSV_COLUMNS = ("episode_id", "t", "theta0", "theta1", "s0", "s1", "y", "x")
FORMAT_VERSION = 1
EX1_P_BINS = 100
EX2_BINS = 50


class DatasetError(ValueError):
    """Malformed, truncated or mismatched dataset file."""


def env_id_of(config) -> str:
    if isinstance(config, Ex1Config):
        return "example1"
    if isinstance(config, Ex2Config):
        return "example2"
    raise ConfigError(f"unknown environment configuration {type(config).__name__}")


def config_from_dict(env_id: str, values: dict):
    cls = {"example1": Ex1Config, "example2": Ex2Config}.get(env_id)
    if cls is None:
        raise ConfigError(f"unknown environment id {env_id!r}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown {env_id} keys: {sorted(unknown)}")
    return cls(**values)


def config_dict(config) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(config).items()}


def config_hash(config) -> str:
    payload = json.dumps({"env": env_id_of(config), "config": config_dict(config)},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------- grids

@dataclass(frozen=True)
class Axis:
    """``n`` equal bins on ``[lo, hi]``: left-closed, right-open, last bin closed.

    Out-of-range values clamp to the edge bins.  Values within 1e-9 bin
    widths below an edge are treated as on the edge, so exact rationals like
    29/100 land in the bin they name despite float round-off.
    """

    lo: float
    hi: float
    n: int

    def __post_init__(self):
        if self.n < 1 or not self.hi > self.lo:
            raise ConfigError(f"invalid axis {self}")

    def index(self, v):
        pos = (np.asarray(v, dtype=float) - self.lo) / (self.hi - self.lo) * self.n
        idx = np.clip(np.floor(np.round(pos, 9)), 0, self.n - 1).astype(np.int64)
        return int(idx) if idx.ndim == 0 else idx

    def centers(self) -> np.ndarray:
        w = (self.hi - self.lo) / self.n
        return self.lo + w * (np.arange(self.n) + 0.5)


@dataclass(frozen=True)
class GridSpec:
    """2-D grid over summary components ``(row, col)``.

    Rows are the sweep order classes: the time index for Example 1 and the
    posterior sd for Example 2.  Cell id is ``row * col_axis.n + col``.
    """

    row_name: str
    row: Axis
    col_name: str
    col: Axis

    @property
    def n_cells(self) -> int:
        return self.row.n * self.col.n

    def cell(self, row_value, col_value):
        return self.row.index(row_value) * self.col.n + self.col.index(col_value)

    def coords(self, cell):
        cell = np.asarray(cell)
        return cell // self.col.n, cell % self.col.n

    def centers(self, cell):
        r, c = self.coords(cell)
        return self.row.centers()[r], self.col.centers()[c]

    def to_dict(self) -> dict:
        return {"row_name": self.row_name, "row": dataclasses.asdict(self.row),
                "col_name": self.col_name, "col": dataclasses.asdict(self.col)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["row_name"], Axis(**d["row"]), d["col_name"], Axis(**d["col"]))


def ex1_grid(t_max: int, p_bins: int = EX1_P_BINS) -> GridSpec:
    # one row per t in 1..t_max
    return GridSpec("t", Axis(0.5, t_max + 0.5, t_max), "p", Axis(0.0, 1.0, p_bins))


def ex2_grid(delta_mean, delta_sd, n_bins: int = EX2_BINS) -> GridSpec:
    """Grid over (s_delta, mean) spanning the 1st-99th percentiles of the sample."""
    m_lo, m_hi = np.percentile(delta_mean, [1, 99])
    s_lo, s_hi = np.percentile(delta_sd, [1, 99])
    return GridSpec("sd", Axis(float(s_lo), float(s_hi), n_bins),
                    "mean", Axis(float(m_lo), float(m_hi), n_bins))


def bin_summary(row_value, col_value, grid: GridSpec):
    """Cell index of a summary vector; vectorised."""
    return grid.cell(row_value, col_value)


# ---------------------------------------------------------------- dataset

@dataclass
class TrajectoryDataset:
    """M episodes of T_max steps each; arrays are indexed ``[episode, t-1]``.

    ``theta`` columns are (theta, hypothesis index) for Example 1 and (b, q)
    for Example 2.  ``summary[..., 0:2]`` is (p_t, k) for Example 1 and
    (delta95 mean, delta95 sd) for Example 2.  ``dose`` is NaN for Example 1.
    """

    env_id: str
    config: object
    master_seed: int
    theta: np.ndarray
    summary: np.ndarray
    outcome: np.ndarray
    dose: np.ndarray
    grid: GridSpec

    @property
    def m(self) -> int:
        return self.theta.shape[0]

    @property
    def t_max(self) -> int:
        return self.outcome.shape[1]

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    @property
    def times(self) -> np.ndarray:
        return np.broadcast_to(np.arange(1, self.t_max + 1), (self.m, self.t_max))

    def grid_rows_cols(self):
        """Per (episode, step) values of the grid's row and column components."""
        if self.env_id == "example1":
            return self.times, self.summary[..., 0]
        return self.summary[..., 1], self.summary[..., 0]

    def cells(self) -> np.ndarray:
        r, c = self.grid_rows_cols()
        return self.grid.cell(r, c)

    def require(self, config):
        """Reject use with a configuration other than the generating one."""
        if config_hash(config) != self.config_hash:
            raise DatasetError(
                f"dataset config hash {self.config_hash} does not match {config_hash(config)}")

    def metadata(self) -> dict:
        return {"format_version": FORMAT_VERSION, "env_id": self.env_id,
                "config": config_dict(self.config), "config_hash": self.config_hash,
                "master_seed": self.master_seed, "m_episodes": self.m, "t_max": self.t_max,
                "grid": self.grid.to_dict()}

    def equals(self, other: "TrajectoryDataset") -> bool:
        return (self.metadata() == other.metadata()
                and all(np.array_equal(getattr(self, f), getattr(other, f), equal_nan=True)
                        for f in ("theta", "summary", "outcome", "dose")))


def _draw_chunk(config, master_seed: int, ids: range):
    draws = [(example1 if isinstance(config, Ex1Config) else example2).draw_episode(
        SeedSpec(master_seed, i).generator(STREAM_EPISODE), config) for i in ids]
    if isinstance(config, Ex1Config):
        theta = np.array([d[0] for d in draws])
        u = np.array([d[1] for d in draws]).reshape(len(ids), config.t_max)
        y = (u < theta[:, None]).astype(float)
        k = np.cumsum(y, axis=1)
        p = k / np.arange(1, config.t_max + 1)
        summary = np.stack([p, k], axis=-1)
        hyp = np.where(theta == config.theta1, 1.0, 2.0)
        return np.stack([theta, hyp], axis=1), summary, y, np.full_like(y, np.nan)
    b = np.array([d[0].b for d in draws])
    q = np.array([d[0].q for d in draws])
    noise = np.array([d[1] for d in draws]).reshape(len(ids), config.t_max)
    tr = example2.simulate_batch(b, q, noise, config)
    summary = np.stack([tr.delta95_mean[:, 1:], tr.delta95_sd[:, 1:]], axis=-1)
    return np.stack([b, q], axis=1), summary, tr.responses, tr.doses


def simulate_arrays(config, master_seed: int, first_id: int, m: int, workers: int = 1,
                    chunk: int = 256):
    """Raw arrays (theta, summary, outcome, dose) for episodes ``first_id..first_id+m-1``."""
    ranges = [range(s, min(s + chunk, first_id + m)) for s in range(first_id, first_id + m, chunk)]
    if workers > 1 and len(ranges) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda r: _draw_chunk(config, master_seed, r), ranges))
    else:
        parts = [_draw_chunk(config, master_seed, r) for r in ranges]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(4))


def run_forward(config, m_episodes: int, master_seed: int, t_max: int | None = None,
                workers: int = 1) -> TrajectoryDataset:
    """Simulate ``m_episodes`` trajectories to the horizon without stopping."""
    if m_episodes < 1:
        raise ConfigError("m_episodes must be >= 1")
    if t_max is not None and t_max != config.t_max:
        config = dataclasses.replace(config, t_max=t_max)
    env_id = env_id_of(config)
    theta, summary, y, x = simulate_arrays(config, master_seed, 0, m_episodes, workers)
    if env_id == "example1":
        grid = ex1_grid(config.t_max)
    else:
        grid = ex2_grid(summary[..., 0], summary[..., 1])
    return TrajectoryDataset(env_id, config, int(master_seed), theta, summary, y, x, grid)


# ---------------------------------------------------------------- persistence

def _fmt(v: float) -> str:
    return "" if math.isnan(v) else f"{v:.17g}"


def save_dataset(dataset: TrajectoryDataset, path) -> tuple[Path, Path]:
    """Write ``path`` (CSV, one row per episode-step) and ``path.meta.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for m in range(dataset.m):
            th0, th1 = (_fmt(v) for v in dataset.theta[m])
            for t in range(dataset.t_max):
                s = dataset.summary[m, t]
                w.writerow((m, t + 1, th0, th1, _fmt(s[0]), _fmt(s[1]),
                            _fmt(dataset.outcome[m, t]), _fmt(dataset.dose[m, t])))
    meta = meta_path(path)
    meta.write_text(json.dumps(dataset.metadata(), indent=2, sort_keys=True) + "\n")
    return path, meta


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def load_dataset(path, expect_config=None) -> TrajectoryDataset:
    """Inverse of :func:`save_dataset`; validates schema, size and config hash."""
    path = Path(path)
    try:
        meta = json.loads(meta_path(path).read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing metadata sidecar {meta_path(path)}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format {meta.get('format_version')!r}")
    config = config_from_dict(meta["env_id"], meta["config"])
    if config_hash(config) != meta["config_hash"]:
        raise DatasetError("metadata config hash does not match its configuration")
    if expect_config is not None and config_hash(expect_config) != meta["config_hash"]:
        raise DatasetError(f"dataset {path} was generated with config hash {meta['config_hash']}, "
                           f"expected {config_hash(expect_config)}")
    m, t_max = int(meta["m_episodes"]), int(meta["t_max"])
    theta = np.empty((m, 2))
    summary = np.empty((m, t_max, 2))
    y = np.empty((m, t_max))
    x = np.empty((m, t_max))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise DatasetError(f"{path}: header {header!r} does not match schema {CSV_COLUMNS}")
        n_rows = 0
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_COLUMNS):
                raise DatasetError(f"{path}: row {lineno} has {len(row)} fields, expected {len(CSV_COLUMNS)}")
            try:
                ep, t = int(row[0]), int(row[1])
                vals = [float(v) if v != "" else math.nan for v in row[2:]]
            except ValueError as exc:
                raise DatasetError(f"{path}: row {lineno}: {exc}") from exc
            if ep != n_rows // t_max or t != n_rows % t_max + 1:
                raise DatasetError(f"{path}: row {lineno} is episode {ep} step {t}, "
                                   f"expected episode {n_rows // t_max} step {n_rows % t_max + 1}")
            theta[ep] = vals[0:2]
            summary[ep, t - 1] = vals[2:4]
            y[ep, t - 1] = vals[4]
            x[ep, t - 1] = vals[5]
            n_rows += 1
    if n_rows != m * t_max:
        raise DatasetError(f"{path}: truncated after row {n_rows + 1}; expected {m * t_max} data rows")
    return TrajectoryDataset(meta["env_id"], config, int(meta["master_seed"]), theta, summary, y, x,
                             GridSpec.from_dict(meta["grid"]))
