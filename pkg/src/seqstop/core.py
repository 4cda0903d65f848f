"""Shared contracts for the sequential-stopping environments.

Both trial designs are episodic: a parameter is drawn from the prior at
reset, one outcome is observed per Continue, and any stopping action ends
the episode.  Utilities are split additively into per-step rewards so that
the return of an episode equals its design utility.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class ConfigError(ValueError):
    """Invalid environment or solver configuration."""


class UsageError(RuntimeError):
    """An operation was called in a state that does not allow it."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite or degenerate values."""


class Action(enum.IntEnum):
    CONTINUE = 0
    STOP1 = 1
    STOP2 = 2


N_ACTIONS = 3
STOP_ACTIONS = (Action.STOP1, Action.STOP2)


def legal_actions(t: int, t_max: int) -> tuple[Action, ...]:
    """Actions available after ``t`` observations.

    No decision is taken before the first outcome (t=0 forces Continue) and
    Continue is unavailable at the horizon.
    """
    if t <= 0:
        return (Action.CONTINUE,)
    if t >= t_max:
        return STOP_ACTIONS
    return (Action.CONTINUE, Action.STOP1, Action.STOP2)


def legal_mask(t, t_max: int) -> np.ndarray:
    """Boolean mask of shape ``t.shape + (3,)``; vectorised ``legal_actions``."""
    t = np.asarray(t)
    mask = np.ones(t.shape + (N_ACTIONS,), dtype=bool)
    mask[..., 0] = t < t_max
    mask[..., 1] = t > 0
    mask[..., 2] = t > 0
    return mask


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: Action
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass(frozen=True)
class SeedSpec:
    """Identifies one reproducible random stream.

    The pair ``(master_seed, stream_id)`` is hashed by ``SeedSequence`` into a
    Philox key, so streams for different episode indices are independent and
    an episode can be regenerated in isolation, in any order, on any worker.
    """

    master_seed: int
    stream_id: int

    def __post_init__(self):
        if self.master_seed < 0 or self.stream_id < 0:
            raise ConfigError("seeds must be non-negative integers")
        if self.master_seed >= 2**64:
            raise ConfigError("master_seed must fit in 64 bits")

    def generator(self, purpose: int = 0) -> np.random.Generator:
        """Generator for this stream; ``purpose`` selects an independent sub-stream."""
        ss = np.random.SeedSequence([self.master_seed, self.stream_id, purpose])
        return np.random.Generator(np.random.Philox(ss))


# sub-stream tags; episode content and agent randomness never share a stream
STREAM_EPISODE = 0
STREAM_AGENT = 1


def rng_for(master_seed: int, stream_id: int, purpose: int = STREAM_EPISODE) -> np.random.Generator:
    return SeedSpec(master_seed, stream_id).generator(purpose)


class StoppingEnv:
    """Gym-style stepping shell shared by both examples.

    Subclasses pre-draw all episode randomness at reset (parameter plus one
    noise value per step), so an episode's outcome sequence does not depend
    on the actions taken.  Stopping policies therefore only truncate the
    no-stopping trajectory.
    """

    t_max: int

    def __init__(self):
        self.t = 0
        self.terminal = True
        self.theta = None

    def reset(self, seed: SeedSpec):
        rng = seed.generator(STREAM_EPISODE)
        self.theta, self._noise = self._draw_episode(rng)
        self.t = 0
        self.terminal = False
        self._reset_summary()
        return self.theta, self.state()

    def step(self, action) -> Transition:
        if self.terminal:
            raise UsageError("step() called on a terminated episode; call reset()")
        action = Action(int(action))
        if action not in legal_actions(self.t, self.t_max):
            raise UsageError(f"action {action.name} is not available at t={self.t}")
        before = self.state()
        if action == Action.CONTINUE:
            reward = -self._continue_cost()
            self.t += 1
            self._observe(self._noise[self.t - 1])
            terminal = False
        else:
            reward = self._terminal_reward(action)
            terminal = True
            self.terminal = True
        return Transition(before, action, float(reward), self.state(), terminal)

    def legal_actions(self) -> tuple[Action, ...]:
        return legal_actions(self.t, self.t_max)

    # subclass hooks
    def _draw_episode(self, rng):  # pragma: no cover - abstract
        raise NotImplementedError

    def _reset_summary(self):  # pragma: no cover - abstract
        raise NotImplementedError

    def _observe(self, noise):  # pragma: no cover - abstract
        raise NotImplementedError

    def _continue_cost(self) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def _terminal_reward(self, action) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def state(self) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError
