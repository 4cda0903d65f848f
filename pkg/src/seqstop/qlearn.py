"""Tabular Q-learning on the Example 1 grid and a small DQN trainer.

Both learners step through episodes drawn from the same per-episode random
streams as the environments and the forward simulator, so episode ``i`` of
seed ``s`` is identical everywhere.  Episodes are drawn in blocks and played
from arrays: ``features[b, t]`` is the network input at step t and
``stop_reward[b, t, d-1]`` the reward of stopping there with action d.
Continuing always costs the per-step sampling cost.

Q-values are in return form (expected remaining reward), so for Example 1
they compare directly with ``ExactSolution.q_return``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import example1, example2
from .backward_induction import TABLE_COLUMNS
from .core import N_ACTIONS, STREAM_AGENT, Action, NumericalError, SeedSpec, legal_mask
from .evaluation import PolicyValue, evaluate_decisions
from .example1 import Ex1Config
from .forward_sim import GridSpec, TrajectoryDataset, ex1_grid, run_forward, simulate_arrays
from .nn import MLP, Adam

log = logging.getLogger(__name__)

BLOCK = 4096


# ---------------------------------------------------------------- episodes

@dataclass
class EpisodeBlock:
    features: np.ndarray      # (B, T+1, 2)
    stop_reward: np.ndarray   # (B, T+1, 2)
    k: np.ndarray | None      # (B, T+1) successes, Example 1 only
    cost: float


def _ex1_block(theta, summary, config: Ex1Config) -> EpisodeBlock:
    B, T = summary.shape[:2]
    k = np.concatenate([np.zeros((B, 1)), summary[..., 1]], axis=1)
    t = np.arange(T + 1)
    feats = example1.encode_state(np.broadcast_to(t, k.shape), k, T)
    hyp = theta[:, 1][:, None]
    wrong1 = np.broadcast_to(hyp != 1, (B, T + 1))
    wrong2 = np.broadcast_to(hyp != 2, (B, T + 1))
    sr = -config.penalty_K * np.stack([wrong1, wrong2], axis=-1).astype(float)
    return EpisodeBlock(feats, sr, k.astype(np.int64), config.cost_c)


def _ex2_block(summary, config: example2.Ex2Config) -> EpisodeBlock:
    B = summary.shape[0]
    prior = example2.prior_summary(config)
    first = np.broadcast_to([prior.delta95_mean, prior.delta95_sd], (B, 1, 2))
    feats = np.concatenate([first, summary[..., :2]], axis=1)
    pay = example2.stop2_payoff(feats[..., 0], feats[..., 1], config)
    sr = np.stack([np.zeros_like(pay), pay], axis=-1)
    return EpisodeBlock(feats, sr, None, config.cost_c1)


REWARDS = ("drawn", "posterior")


def episode_block(config, master_seed: int, first_id: int, n: int, workers: int = 1,
                  reward: str = "drawn") -> EpisodeBlock:
    """Episodes ``first_id..first_id+n-1``; ``reward="posterior"`` scores Example 1 stops by E[R | t, k]."""
    if reward not in REWARDS:
        raise ValueError(f"reward must be one of {REWARDS}, got {reward!r}")
    theta, summary, _, _ = simulate_arrays(config, master_seed, first_id, n, workers)
    if isinstance(config, Ex1Config):
        blk = _ex1_block(theta, summary, config)
        return posterior_rewards(blk, config) if reward == "posterior" else blk
    return _ex2_block(summary, config)


def posterior_rewards(blk: EpisodeBlock, config: Ex1Config) -> EpisodeBlock:
    """Same episodes with each stop reward replaced by its expectation given (t, k)."""
    T = blk.k.shape[1] - 1
    t = np.broadcast_to(np.arange(T + 1), blk.k.shape)
    sr = np.stack([example1.expected_terminal_utility(t, blk.k, a, config) + config.cost_c * t
                   for a in (Action.STOP1, Action.STOP2)], axis=-1)
    return EpisodeBlock(blk.features, sr, blk.k, blk.cost)


def dataset_features(ds: TrajectoryDataset) -> np.ndarray:
    """Network inputs at every stored (episode, step); shape (M, T, 2)."""
    if ds.env_id == "example1":
        return example1.encode_state(ds.times, ds.summary[..., 1], ds.t_max)
    return ds.summary[..., :2].copy()


def greedy_actions(q: np.ndarray, t, t_max: int) -> np.ndarray:
    """Argmax over legal actions; ties go to the lowest action index."""
    q = np.where(legal_mask(t, t_max), q, -np.inf)
    return np.argmax(q, axis=-1)


# ---------------------------------------------------------------- tabular

@dataclass
class QTable:
    """Q-values and visit counts per (grid cell, action); cells are Example 1 (t, p) bins."""

    grid: GridSpec
    t_max: int
    q: np.ndarray
    visits: np.ndarray

    @classmethod
    def empty(cls, t_max: int, init: float = 0.0) -> "QTable":
        grid = ex1_grid(t_max)
        q = np.full((grid.n_cells, N_ACTIONS), float(init))
        q[grid.cell(t_max, np.zeros(grid.col.n) + grid.col.centers()), Action.CONTINUE] = -np.inf
        return cls(grid, t_max, q, np.zeros((grid.n_cells, N_ACTIONS), dtype=np.int64))

    def cell(self, t, k):
        return self.grid.cell(t, np.asarray(k) / np.asarray(t))

    def greedy(self, cell) -> int:
        return int(np.argmax(self.q[cell]))

    def policy(self) -> np.ndarray:
        return np.argmax(self.q, axis=1)

    @property
    def cell_visits(self) -> np.ndarray:
        return self.visits.sum(axis=1)

    def decisions(self, ds: TrajectoryDataset) -> np.ndarray:
        return self.policy()[ds.cells()]

    def table_rows(self):
        r, c = self.grid.coords(np.arange(self.grid.n_cells))
        rc, cc = self.grid.centers(np.arange(self.grid.n_cells))
        pol = self.policy()
        counts = self.cell_visits
        for j in range(self.grid.n_cells):
            yield (j, int(r[j]), int(c[j]), float(rc[j]), float(cc[j]),
                   *(float(v) for v in self.q[j]), int(pol[j]) if counts[j] else -1, int(counts[j]))


def tabular_update(q: np.ndarray, cell: int, action: int, reward: float, next_max: float | None,
                   alpha: float) -> float:
    """``Q <- (1-a) Q + a (r + max_d Q(s', d))``; ``next_max=None`` marks a terminal transition."""
    target = reward if next_max is None else reward + next_max
    q[cell, action] = (1.0 - alpha) * q[cell, action] + alpha * target
    return q[cell, action]


@dataclass(frozen=True)
class EpsilonSchedule:
    """Linear decay from ``start`` to ``end`` over the first ``fraction`` of the budget."""

    start: float = 1.0
    end: float = 0.05
    fraction: float = 0.2

    def __post_init__(self):
        if not (0 <= self.end <= 1 and 0 <= self.start <= 1 and self.fraction >= 0):
            raise ValueError("epsilon values must lie in [0, 1]")

    def __call__(self, i, total: int):
        horizon = max(self.fraction * total, 1e-12)
        frac = np.minimum(np.asarray(i, dtype=float) / horizon, 1.0)
        return self.start + (self.end - self.start) * frac


@dataclass(frozen=True)
class TabularOptions:
    episodes: int = 200_000
    epsilon: EpsilonSchedule = EpsilonSchedule()
    alpha: float | None = None     # constant step size; None = (1 + visits)^-alpha_power
    alpha_power: float = 0.8
    init: float = 0.0
    # "posterior" learns from the belief-state reward E[R | t, k]; "drawn" from the sampled theta
    reward: str = "posterior"

    def __post_init__(self):
        if self.reward not in REWARDS:
            raise ValueError(f"reward must be one of {REWARDS}, got {self.reward!r}")
        if not 0.5 < self.alpha_power <= 1.0:
            raise ValueError("alpha_power must lie in (0.5, 1] for decreasing Robbins-Monro steps")


def run_tabular(config: Ex1Config, options: TabularOptions = TabularOptions(), seed: int = 0) -> QTable:
    """Epsilon-greedy Q-learning over the live table, one episode at a time."""
    if not isinstance(config, Ex1Config):
        raise TypeError("tabular Q-learning needs the finite Example 1 state grid")
    T = config.t_max
    table = QTable.empty(T, options.init)
    q, visits = table.q, table.visits
    # cell of every (t, k) lattice point, row 0 unused
    cell_of = np.zeros((T + 1, T + 1), dtype=np.int64)
    for t in range(1, T + 1):
        cell_of[t, : t + 1] = table.grid.cell(t, np.arange(t + 1) / t)
    agent = SeedSpec(seed, 0).generator(STREAM_AGENT)
    n = options.episodes
    const_alpha = options.alpha
    power = options.alpha_power
    done = 0
    while done < n:
        b = min(BLOCK, n - done)
        blk = episode_block(config, seed, done, b, reward=options.reward)
        eps = options.epsilon(np.arange(done, done + b), n)
        u = agent.random((b, T))
        pick = agent.random((b, T))
        for i in range(b):
            k_row = blk.k[i]
            sr = blk.stop_reward[i]
            e = eps[i]
            t = 1
            cell = int(cell_of[1, k_row[1]])
            while True:
                if u[i, t - 1] < e:
                    # uniform over the legal actions
                    a = int(pick[i, t - 1] * 3) if t < T else 1 + int(pick[i, t - 1] * 2)
                else:
                    a = int(np.argmax(q[cell]))
                n_sa = visits[cell, a]
                alpha = const_alpha if const_alpha is not None else (1.0 + n_sa) ** -power
                visits[cell, a] = n_sa + 1
                if a != 0:
                    tabular_update(q, cell, a, float(sr[t, a - 1]), None, alpha)
                    break
                nxt = int(cell_of[t + 1, k_row[t + 1]])
                tabular_update(q, cell, 0, -blk.cost, float(np.max(q[nxt])), alpha)
                cell = nxt
                t += 1
        done += b
    return table


def lattice_comparison(table: QTable, solution: example1.ExactSolution, min_visits: int = 100):
    """Per visited lattice cell: (t, k, visits, max |Q - exact|, greedy agrees, ties allowed)."""
    rows = []
    exact = solution.q_return
    T = table.t_max
    for t in range(1, T + 1):
        for k in range(t + 1):
            cell = int(table.cell(t, k))
            n = int(table.cell_visits[cell])
            if n < min_visits:
                continue
            legal = legal_mask(t, T)
            err = float(np.max(np.abs(table.q[cell][legal] - exact[t, k][legal])))
            a = int(np.argmax(table.q[cell]))
            best = np.max(exact[t, k][legal])
            rows.append((t, k, n, err, bool(exact[t, k, a] >= best - 1e-9)))
    return rows


# ---------------------------------------------------------------- replay buffer

class ReplayBuffer:
    """Bounded FIFO of (features, action, reward, next features, next t, terminal)."""

    def __init__(self, capacity: int, dim: int = 2, seed: int | np.random.Generator = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.s = np.zeros((capacity, dim))
        self.a = np.zeros(capacity, dtype=np.int64)
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, dim))
        self.t2 = np.zeros(capacity, dtype=np.int64)
        self.done = np.zeros(capacity, dtype=bool)
        self.inserted = 0
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def add(self, s, a, r, s2, t2, done) -> None:
        i = self.inserted % self.capacity
        self.s[i], self.a[i], self.r[i], self.s2[i], self.t2[i], self.done[i] = s, a, r, s2, t2, done
        self.inserted += 1

    def sample_indices(self, n: int) -> np.ndarray:
        if len(self) == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self.rng.integers(0, len(self), size=n)

    def sample(self, n: int):
        i = self.sample_indices(n)
        return self.s[i], self.a[i], self.r[i], self.s2[i], self.t2[i], self.done[i]


# ---------------------------------------------------------------- DQN

@dataclass(frozen=True)
class DQNConfig:
    total_steps: int = 200_000
    buffer_capacity: int = 50_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    epsilon: EpsilonSchedule = EpsilonSchedule()
    target_sync: int = 1000
    learning_starts: int = 1000
    train_every: int = 4
    eval_every: int = 10_000
    eval_episodes: int = 2000
    hidden: tuple[int, ...] = (64, 64)
    reward_scale: float = 0.01     # network is trained on scaled rewards; reported Q-values are unscaled
    eval_seed_offset: int = 1_000_003
    reward: str = "posterior"      # see episode_block; evaluation always uses drawn rewards

    def __post_init__(self):
        if self.reward not in REWARDS:
            raise ValueError(f"reward must be one of {REWARDS}, got {self.reward!r}")
        ints = (self.total_steps, self.buffer_capacity, self.batch_size, self.target_sync,
                self.eval_every, self.eval_episodes, self.train_every)
        if min(ints) < 1 or self.learning_rate <= 0 or self.reward_scale <= 0 or self.learning_starts < 0:
            raise ValueError("DQN settings must be positive")


@dataclass
class TracePoint:
    step: int
    mean_return: float
    se: float
    epsilon: float
    loss: float


@dataclass
class DQNResult:
    best: MLP
    best_step: int
    best_value: float
    trace: list = field(default_factory=list)
    diverged: bool = False
    reward_scale: float = 1.0

    def q_values(self, features) -> np.ndarray:
        return self.best(features) / self.reward_scale


class Divergence(NumericalError):
    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def network_decisions(net: MLP, ds: TrajectoryDataset) -> np.ndarray:
    """Greedy actions of ``net`` at every stored (episode, step) of ``ds``."""
    f = dataset_features(ds).reshape(-1, 2)
    q = net(f).reshape(ds.m, ds.t_max, N_ACTIONS)
    return greedy_actions(q, ds.times, ds.t_max)


def evaluate_network(net: MLP, ds: TrajectoryDataset) -> PolicyValue:
    return evaluate_decisions(ds, network_decisions(net, ds))


def dqn_loss_and_grads(net: MLP, target: MLP, batch, t_max: int):
    """Mean squared TD error and its gradient; Continue is masked at the horizon."""
    s, a, r, s2, t2, done = batch
    q, cache = net.forward(s)
    q2 = target(s2)
    q2 = np.where(legal_mask(t2, t_max), q2, -np.inf)
    y = r + np.where(done, 0.0, np.max(q2, axis=1))
    rows = np.arange(len(a))
    td = q[rows, a] - y
    loss = float(np.mean(td * td))
    g = np.zeros_like(q)
    g[rows, a] = 2.0 * td / len(a)
    return loss, net.backward(cache, g)


def dqn_train(config, dqn: DQNConfig = DQNConfig(), seed: int = 0, workers: int = 1) -> DQNResult:
    """Epsilon-greedy DQN with replay and a hard-synced target network.

    Every ``eval_every`` steps the greedy policy is scored on a fixed set of
    fresh episodes (seed ``seed + eval_seed_offset``); the best scoring
    network is kept.
    """
    T = config.t_max
    agent = SeedSpec(seed, 0).generator(STREAM_AGENT)
    net = MLP.init((2, *dqn.hidden, N_ACTIONS), agent)
    target = net.copy()
    opt = Adam(lr=dqn.learning_rate)
    buf = ReplayBuffer(dqn.buffer_capacity, 2, agent)
    eval_ds = run_forward(config, dqn.eval_episodes, seed + dqn.eval_seed_offset, workers=workers)
    result = DQNResult(net.copy(), 0, -np.inf, reward_scale=dqn.reward_scale)
    scale = dqn.reward_scale

    blk, blk_i, next_id = None, BLOCK, 0
    step, loss, t = 0, float("nan"), 0
    ep = None
    losses = []
    while step < dqn.total_steps:
        if t == 0:
            if blk_i == BLOCK:
                blk = episode_block(config, seed, next_id, BLOCK, reward=dqn.reward)
                next_id += BLOCK
                blk_i = 0
            ep = blk_i
            blk_i += 1
            t = 1   # the first outcome is always observed
        s = blk.features[ep, t]
        eps = float(dqn.epsilon(step, dqn.total_steps))
        if agent.random() < eps:
            a = int(agent.integers(0, N_ACTIONS)) if t < T else int(agent.integers(1, N_ACTIONS))
        else:
            a = int(greedy_actions(net(s)[0], t, T))
        if a == Action.CONTINUE:
            buf.add(s, a, -blk.cost * scale, blk.features[ep, t + 1], t + 1, False)
            t += 1
        else:
            buf.add(s, a, blk.stop_reward[ep, t, a - 1] * scale, s, t, True)
            t = 0
        step += 1

        if step >= dqn.learning_starts and len(buf) >= dqn.batch_size and step % dqn.train_every == 0:
            loss, grads = dqn_loss_and_grads(net, target, buf.sample(dqn.batch_size), T)
            if not np.isfinite(loss):
                raise Divergence(f"non-finite loss at step {step}", result.trace)
            opt.update(net, grads)
            losses.append(loss)
        if step % dqn.target_sync == 0:
            target = net.copy()
        if step % dqn.eval_every == 0 or step == dqn.total_steps:
            pv = evaluate_network(net, eval_ds)
            mean_loss = float(np.mean(losses)) if losses else float("nan")
            losses = []
            result.trace.append(TracePoint(step, pv.mean, pv.se, eps, mean_loss))
            log.info("dqn step %d: eval %.3f (se %.3f)", step, pv.mean, pv.se)
            if pv.mean > result.best_value:
                result.best, result.best_step, result.best_value = net.copy(), step, pv.mean
    return result


def network_table_rows(net: MLP, grid: GridSpec, t_max: int, reward_scale: float = 1.0, env_id="example1"):
    """Q-values of ``net`` at grid cell centres in the backward-induction table schema."""
    cells = np.arange(grid.n_cells)
    r, c = grid.coords(cells)
    rc, cc = grid.centers(cells)
    if env_id == "example1":
        t = np.rint(rc).astype(np.int64)
        feats = np.stack([t / t_max, cc], axis=1)
    else:
        t = np.ones_like(r)
        feats = np.stack([cc, rc], axis=1)
    q = net(feats) / reward_scale
    q = np.where(legal_mask(t, t_max), q, -np.inf)
    act = greedy_actions(q, t, t_max)
    for j in cells:
        yield (int(j), int(r[j]), int(c[j]), float(rc[j]), float(cc[j]), *(float(v) for v in q[j]), int(act[j]), 0)


def write_table(path, rows, columns=TABLE_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_trace(path, trace) -> None:
    write_table(path, ((p.step, p.mean_return, p.se, p.epsilon, p.loss) for p in trace),
                ("step", "mean_return", "se", "epsilon", "loss"))
