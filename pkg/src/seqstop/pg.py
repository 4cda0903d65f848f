"""REINFORCE with a softmax policy over the standardized Example 2 summary.

The policy sees ``z = (summary - loc) / scale`` with ``loc`` and ``scale``
frozen from a reference forward simulation.  The gradient is the printed
score-function estimator: per episode, the summed score of the taken
actions times the episode return, minus an optional batch-mean baseline.
All gradients are in ascent orientation (they point uphill in J).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import N_ACTIONS, STREAM_AGENT, Action, NumericalError, SeedSpec, legal_mask
from .evaluation import PolicyValue, evaluate_decisions
from .forward_sim import GridSpec, TrajectoryDataset, run_forward
from .nn import MLP, Adam
from .qlearn import dataset_features, episode_block

log = logging.getLogger(__name__)

REFERENCE_SEED_OFFSET = 2_000_003
EVAL_SEED_OFFSET = 1_000_003


@dataclass(frozen=True)
class Standardizer:
    loc: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        f = features.reshape(-1, features.shape[-1])
        scale = f.std(axis=0)
        return cls(f.mean(axis=0), np.where(scale > 0, scale, 1.0))

    @classmethod
    def identity(cls, dim: int = 2) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.loc) / self.scale


@dataclass
class RolloutBatch:
    """Flattened decision steps of ``n`` episodes plus their returns."""

    inputs: np.ndarray     # (S, 2) standardized states
    actions: np.ndarray    # (S,)
    t: np.ndarray          # (S,) decision step, 1..T
    episode: np.ndarray    # (S,) episode index within the batch
    logp: np.ndarray       # (S,)
    returns: np.ndarray    # (n,)
    t_max: int
    stop_t: np.ndarray | None = None
    cost: float = 0.0      # per-step sampling cost, for reward-to-go weights

    @property
    def n(self) -> int:
        return self.returns.size


BASELINES = ("batch-mean", "per-step", "none")


@dataclass(frozen=True)
class PGConfig:
    episodes_per_batch: int = 256
    n_batches: int = 400
    learning_rate: float = 1e-3
    baseline: str = "batch-mean"   # see BASELINES
    entropy_coef: float = 0.01
    eval_every: int = 20
    eval_episodes: int = 2000
    reward_scale: float = 0.01
    reward_to_go: bool = False
    hidden: tuple[int, ...] = (64, 64)
    reference_episodes: int = 1000
    head_bias: tuple[float, float, float] = (0.0, 0.0, 0.0)   # added to the initial output logits
    normalize_advantages: bool = False

    def __post_init__(self):
        if min(self.episodes_per_batch, self.n_batches, self.eval_every, self.eval_episodes,
               self.reference_episodes) < 1:
            raise ValueError("PG budgets must be positive")
        if self.learning_rate <= 0 or self.reward_scale <= 0:
            raise ValueError("learning_rate and reward_scale must be positive")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be non-negative")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}")


def policy_probs(net: MLP, inputs, t, t_max: int) -> np.ndarray:
    return net(inputs, mask=legal_mask(t, t_max))


def rollout(config, net: MLP, n: int, seed: int, first_id: int = 0,
            standardizer: Standardizer | None = None, rng: np.random.Generator | None = None) -> RolloutBatch:
    """Sample ``n`` episodes from the stochastic policy; Continue is masked at the horizon."""
    std = standardizer or Standardizer.identity()
    T = config.t_max
    blk = episode_block(config, seed, first_id, n)
    rng = rng or SeedSpec(seed, first_id).generator(STREAM_AGENT)
    alive = np.arange(n)
    stop_t = np.full(n, T)
    returns = np.zeros(n)
    rec = {k: [] for k in ("inputs", "actions", "t", "episode", "logp")}
    for t in range(1, T + 1):
        if alive.size == 0:
            break
        x = std(blk.features[alive, t])
        p = policy_probs(net, x, t, T)
        u = rng.random(alive.size)
        a = np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1), N_ACTIONS - 1)
        # never land on a zero-probability action through round-off
        a = np.where(p[np.arange(alive.size), a] > 0, a, np.argmax(p, axis=1))
        lp = np.log(p[np.arange(alive.size), a])
        for k, v in zip(rec, (x, a, np.full(alive.size, t), alive, lp)):
            rec[k].append(v)
        stop = a != Action.CONTINUE
        ids = alive[stop]
        stop_t[ids] = t
        returns[ids] = -blk.cost * t + blk.stop_reward[ids, t, a[stop] - 1]
        alive = alive[~stop]
    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in rec.items()}
    return RolloutBatch(cat["inputs"].reshape(-1, 2), cat["actions"].astype(np.int64),
                        cat["t"].astype(np.int64), cat["episode"].astype(np.int64), cat["logp"],
                        returns, T, stop_t, blk.cost)


def pg_gradient(batch: RolloutBatch, net: MLP, baseline: str = "batch-mean", entropy_coef: float = 0.0,
                reward_scale: float = 1.0, reward_to_go: bool = False, returns: np.ndarray | None = None,
                normalize: bool = False):
    """Ascent direction of J (plus entropy bonus) and the mean policy entropy.

    ``returns`` overrides the batch returns (used by the score-function check).
    """
    if batch.n == 0 or batch.actions.size == 0:
        raise ValueError("empty rollout batch")
    if not np.all(np.isfinite(batch.logp)):
        raise NumericalError("non-finite log-probability in rollout batch")
    if baseline not in BASELINES:
        raise ValueError(f"baseline must be one of {BASELINES}")
    G = (batch.returns if returns is None else np.asarray(returns, dtype=float)) * reward_scale
    target = G[batch.episode]
    if reward_to_go:
        # drop the sampling costs already paid before decision step t
        target = target + batch.cost * batch.t * reward_scale
    if baseline == "batch-mean":
        weight = target - G.mean()
    elif baseline == "per-step":
        # mean target over the episodes still deciding at the same step
        n_t = np.bincount(batch.t)
        weight = target - (np.bincount(batch.t, weights=target) / np.maximum(n_t, 1))[batch.t]
    else:
        weight = target
    if normalize:
        sd = weight.std()
        weight = weight / sd if sd > 0 else weight
    mask = legal_mask(batch.t, batch.t_max)
    p, cache = net.forward(batch.inputs, mask=mask)
    onehot = np.zeros_like(p)
    onehot[np.arange(p.shape[0]), batch.actions] = 1.0
    g = (onehot - p) * weight[:, None] / batch.n
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = np.where(p > 0, np.log(p), 0.0)
    ent = -np.sum(p * logp, axis=1)
    if entropy_coef:
        # d H / d z_k = -p_k (log p_k + H), averaged over decision steps
        g += entropy_coef * (-p * (logp + ent[:, None])) / p.shape[0]
    return net.backward(cache, g, wrt="logits"), float(ent.mean())


@dataclass
class PGTracePoint:
    batch: int
    mean_return: float
    se: float
    entropy: float


@dataclass
class PGResult:
    best: MLP
    best_batch: int
    best_value: float
    standardizer: Standardizer
    trace: list = field(default_factory=list)


def mode_decisions(net: MLP, ds: TrajectoryDataset, std: Standardizer) -> np.ndarray:
    """Most probable action at every stored (episode, step); ties to the lowest index."""
    x = std(dataset_features(ds)).reshape(-1, 2)
    t = ds.times.reshape(-1)
    p = policy_probs(net, x, t, ds.t_max)
    return np.argmax(p, axis=1).reshape(ds.m, ds.t_max)


def evaluate_mode(net: MLP, ds: TrajectoryDataset, std: Standardizer) -> PolicyValue:
    return evaluate_decisions(ds, mode_decisions(net, ds, std))


def reference_standardizer(config, seed: int, n: int) -> tuple[Standardizer, TrajectoryDataset]:
    ref = run_forward(config, n, seed + REFERENCE_SEED_OFFSET)
    return Standardizer.fit(dataset_features(ref)), ref


def train(config, pg: PGConfig = PGConfig(), seed: int = 0, workers: int = 1) -> PGResult:
    """Batch REINFORCE with Adam; the best mode-action policy on fixed fresh episodes is kept."""
    std, _ = reference_standardizer(config, seed, pg.reference_episodes)
    agent = SeedSpec(seed, 0).generator(STREAM_AGENT)
    net = MLP.init((2, *pg.hidden, N_ACTIONS), agent, head="softmax")
    net.biases[-1] += np.asarray(pg.head_bias, dtype=float)
    opt = Adam(lr=pg.learning_rate)
    eval_ds = run_forward(config, pg.eval_episodes, seed + EVAL_SEED_OFFSET, workers=workers)
    result = PGResult(net.copy(), 0, -np.inf, std)
    ent = float("nan")
    for i in range(1, pg.n_batches + 1):
        batch = rollout(config, net, pg.episodes_per_batch, seed, (i - 1) * pg.episodes_per_batch, std, agent)
        grads, ent = pg_gradient(batch, net, pg.baseline, pg.entropy_coef, pg.reward_scale, pg.reward_to_go,
                                  normalize=pg.normalize_advantages)
        opt.update(net, grads, ascent=True)
        if not all(np.all(np.isfinite(p)) for p in net.params()):
            raise NumericalError(f"policy parameters diverged at batch {i}")
        if i % pg.eval_every == 0 or i == pg.n_batches:
            pv = evaluate_mode(net, eval_ds, std)
            result.trace.append(PGTracePoint(i, pv.mean, pv.se, ent))
            log.info("pg batch %d: eval %.3f (se %.3f), entropy %.3f", i, pv.mean, pv.se, ent)
            if pv.mean > result.best_value:
                result.best, result.best_batch, result.best_value = net.copy(), i, pv.mean
    return result


@dataclass
class RegionTable:
    grid: GridSpec
    action: np.ndarray     # (n_cells,) mode action at each cell centre
    visited: np.ndarray    # (n_cells,) bool

    def rows(self):
        r, c = self.grid.coords(np.arange(self.grid.n_cells))
        rc, cc = self.grid.centers(np.arange(self.grid.n_cells))
        for j in range(self.grid.n_cells):
            yield (j, int(r[j]), int(c[j]), float(rc[j]), float(cc[j]), int(self.action[j]), int(self.visited[j]))

    def banded_fraction(self) -> tuple[float, int]:
        """Share of visited rows whose actions, by increasing column, read Stop1* Continue* Stop2*."""
        rank = np.array([1, 0, 2])[self.action].reshape(self.grid.row.n, self.grid.col.n)
        vis = self.visited.reshape(self.grid.row.n, self.grid.col.n)
        ok, n = 0, 0
        for r in range(self.grid.row.n):
            if not vis[r].any():
                continue
            n += 1
            seq = rank[r][vis[r]]
            ok += bool(np.all(np.diff(seq) >= 0))
        return (ok / n if n else float("nan")), n

    def visited_actions(self) -> set:
        """Actions taken anywhere in the visited envelope; a wedge needs all three."""
        return {int(a) for a in np.unique(self.action[self.visited])}


REGION_COLUMNS = ("cell", "row", "col", "row_center", "col_center", "action", "visited")


def extract_regions(net: MLP, grid: GridSpec, std: Standardizer, reference: TrajectoryDataset | None = None,
                    t: int = 1, t_max: int | None = None) -> RegionTable:
    """Mode action at every Example 2 grid cell centre (rows sd, columns mean).

    Cells never reached by ``reference`` episodes are flagged unvisited.
    """
    cells = np.arange(grid.n_cells)
    sd, mean = grid.centers(cells)
    x = std(np.stack([mean, sd], axis=1))
    t_max = t_max if t_max is not None else (reference.t_max if reference is not None else t + 1)
    act = np.argmax(policy_probs(net, x, np.full(cells.size, t), t_max), axis=1)
    if reference is not None:
        r, c = reference.grid_rows_cols()
        visited = np.bincount(grid.cell(r, c).reshape(-1), minlength=grid.n_cells) > 0
    else:
        visited = np.ones(grid.n_cells, dtype=bool)
    return RegionTable(grid, act, visited)


def write_regions(path, table: RegionTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REGION_COLUMNS)
        for row in table.rows():
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
