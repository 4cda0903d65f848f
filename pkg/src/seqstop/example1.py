"""Binary-hypothesis trial: Bernoulli outcomes under a two-point prior.

The state after ``t`` cohorts is ``(t, k)`` with ``k`` the number of
successes; the running fraction ``p_t = k / t`` is what the learners and the
boundary rules see.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Action, ConfigError, StoppingEnv, UsageError, legal_mask


@dataclass(frozen=True)
class Ex1Config:
    theta1: float = 0.4
    theta2: float = 0.6
    cost_c: float = 1.0
    penalty_K: float = 100.0
    t_max: int = 50

    def __post_init__(self):
        if not (0.0 < self.theta1 < self.theta2 < 1.0):
            raise ConfigError("need 0 < theta1 < theta2 < 1")
        if self.cost_c <= 0 or self.penalty_K <= 0:
            raise ConfigError("cost_c and penalty_K must be positive")
        if int(self.t_max) != self.t_max or self.t_max < 1:
            raise ConfigError("t_max must be a positive integer")

    @property
    def thetas(self) -> tuple[float, float]:
        return (self.theta1, self.theta2)


@dataclass(frozen=True)
class Ex1Summary:
    t: int
    successes_k: int

    def __post_init__(self):
        if not 0 <= self.successes_k <= self.t:
            raise ValueError(f"invalid summary t={self.t}, k={self.successes_k}")

    @property
    def p(self) -> float:
        return self.successes_k / self.t if self.t else 0.5


def posterior_prob_theta1(t, k, config: Ex1Config):
    """P(theta = theta1 | t, k), computed from the log likelihood ratio.

    Vectorised over ``t`` and ``k``.
    """
    t = np.asarray(t, dtype=float)
    k = np.asarray(k, dtype=float)
    th1, th2 = config.thetas
    # log L2 - log L1
    llr = k * (math.log(th2) - math.log(th1)) + (t - k) * (math.log1p(-th2) - math.log1p(-th1))
    out = 1.0 / (1.0 + np.exp(llr))
    return float(out) if out.ndim == 0 else out


def predictive_success(t, k, config: Ex1Config):
    """P(Y_{t+1} = 1 | t, k) under the current posterior."""
    p1 = posterior_prob_theta1(t, k, config)
    return p1 * config.theta1 + (1.0 - p1) * config.theta2


def expected_terminal_utility(t, k, action, config: Ex1Config):
    """Posterior expected utility of stopping with ``action`` after ``t`` cohorts."""
    action = Action(int(action))
    if action == Action.CONTINUE:
        raise UsageError("expected_terminal_utility is defined for stopping actions only")
    p1 = posterior_prob_theta1(t, k, config)
    p_wrong = 1.0 - p1 if action == Action.STOP1 else p1
    out = -config.cost_c * np.asarray(t, dtype=float) - config.penalty_K * p_wrong
    return float(out) if np.ndim(out) == 0 else out


def reward(action, theta: float, config: Ex1Config) -> float:
    """Per-step reward: -c for Continue, -K for reporting the wrong hypothesis."""
    action = Action(int(action))
    if action == Action.CONTINUE:
        return -config.cost_c
    reported = config.thetas[int(action) - 1]
    return -config.penalty_K if reported != theta else 0.0


def utility(t: int, action, theta: float, config: Ex1Config) -> float:
    """Design utility -cT - K 1(theta != theta_D) for stopping at ``t``."""
    return -config.cost_c * t + reward(action, theta, config)


def encode_state(t, k, t_max: int) -> np.ndarray:
    """Learner input ``(t / t_max, p_t)`` with ``p_0 = 0.5``."""
    t = np.asarray(t, dtype=float)
    k = np.asarray(k, dtype=float)
    p = np.where(t > 0, k / np.maximum(t, 1.0), 0.5)
    return np.stack([t / t_max, p], axis=-1)


@dataclass
class ExactSolution:
    """Expected utilities ``q[t, k, d]`` and policy ``policy[t, k]`` on the full lattice.

    ``q`` is in utility form: it includes the sampling cost already paid,
    ``-c t``, exactly like the grid estimates Û(S, d).  ``q_return`` drops
    that term and is the expected remaining return that Q-learning targets.
    Entries with ``k > t`` are unreachable and hold NaN / -1.  Continue at
    ``t_max`` holds ``-inf``.
    """

    config: Ex1Config
    q: np.ndarray
    policy: np.ndarray

    @property
    def q_return(self) -> np.ndarray:
        t = np.arange(self.config.t_max + 1, dtype=float)[:, None, None]
        return self.q + self.config.cost_c * t

    @property
    def value(self) -> np.ndarray:
        """Optimal expected utility per cell (Continue forced at t=0)."""
        t = np.arange(self.config.t_max + 1)[:, None] * np.ones((1, self.config.t_max + 1), dtype=int)
        legal = legal_mask(t, self.config.t_max)
        v = np.max(np.where(legal & ~np.isnan(self.q), self.q, -np.inf), axis=-1)
        v[np.isnan(self.q[..., 1])] = np.nan
        return v

    @property
    def optimal_value(self) -> float:
        """Expected utility of the optimal design before any data."""
        return float(self.q[0, 0, 0])


MAX_EXACT_CELLS = 10_000


def exact_dp(config: Ex1Config) -> ExactSolution:
    """Backward induction over the exact ``(t, k)`` lattice."""
    T = config.t_max
    if (T + 1) * (T + 2) // 2 > MAX_EXACT_CELLS:
        raise MemoryError(f"t_max={T} gives more than {MAX_EXACT_CELLS} lattice cells")
    q = np.full((T + 1, T + 1, 3), np.nan)
    policy = np.full((T + 1, T + 1), -1, dtype=np.int64)
    for t in range(T, -1, -1):
        k = np.arange(t + 1)
        q[t, k, 1] = expected_terminal_utility(t, k, Action.STOP1, config)
        q[t, k, 2] = expected_terminal_utility(t, k, Action.STOP2, config)
        if t == T:
            q[t, k, 0] = -np.inf
        else:
            # Continue is -inf at t_max, so this is the forced-stop value there
            v_next = np.max(q[t + 1, : t + 2], axis=-1)
            s = predictive_success(t, k, config)
            # stop values already carry -c t, so continuing adds no cost term here
            q[t, k, 0] = s * v_next[k + 1] + (1.0 - s) * v_next[k]
        if t == 0:
            policy[t, 0] = Action.CONTINUE
        else:
            # lowest action index wins ties
            policy[t, k] = np.argmax(q[t, k], axis=-1)
    return ExactSolution(config, q, policy)


class Ex1Env(StoppingEnv):
    """Stepping interface; state vector is ``(t, k, p_t)``."""

    def __init__(self, config: Ex1Config):
        super().__init__()
        self.config = config
        self.t_max = config.t_max
        self.k = 0

    def _draw_episode(self, rng):
        return draw_episode(rng, self.config)

    def _reset_summary(self):
        self.k = 0

    def _observe(self, u):
        self.k += int(u < self.theta)

    def _continue_cost(self):
        return self.config.cost_c

    def _terminal_reward(self, action):
        return reward(action, self.theta, self.config)

    def state(self) -> np.ndarray:
        return np.array([self.t, self.k, self.k / self.t if self.t else 0.5])

    def summary(self) -> Ex1Summary:
        return Ex1Summary(self.t, self.k)


def draw_episode(rng: np.random.Generator, config: Ex1Config):
    """Prior draw of theta plus the uniforms that decide each outcome."""
    theta = config.thetas[int(rng.random() >= 0.5)]
    uniforms = rng.random(config.t_max)
    return theta, uniforms
