"""Scoring stopping policies by truncating stored no-stopping trajectories.

Because the outcome sequence of an episode does not depend on when it is
stopped, the utility of any stopping policy on an episode is the terminal
utility at the first step where the policy stops.  Policies are given as
decision matrices ``decisions[m, t-1]`` over the dataset's steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import example1, example2
from .core import Action
from .forward_sim import TrajectoryDataset


@dataclass(frozen=True)
class PolicyValue:
    mean: float
    se: float
    utilities: np.ndarray
    stop_t: np.ndarray
    actions: np.ndarray

    def paired_diff(self, other: "PolicyValue") -> tuple[float, float]:
        """Mean and SE of the episode-wise difference ``self - other``."""
        d = self.utilities - other.utilities
        return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0


def terminal_utilities(ds: TrajectoryDataset) -> np.ndarray:
    """Realised utility of Stop1/Stop2 at every (episode, step); shape (M, T, 2).

    Example 1 scores against the episode's drawn theta; Example 2's utility
    is a deterministic function of the summary and t.
    """
    t = ds.times.astype(float)
    if ds.env_id == "example1":
        cfg = ds.config
        hyp = ds.theta[:, 1][:, None]
        base = -cfg.cost_c * t
        return np.stack([base - cfg.penalty_K * (hyp != 1), base - cfg.penalty_K * (hyp != 2)], axis=-1)
    cfg = ds.config
    u1 = -cfg.cost_c1 * t
    u2 = u1 + example2.stop2_payoff(ds.summary[..., 0], ds.summary[..., 1], cfg)
    return np.stack([u1, u2], axis=-1)


def expected_terminal_values(ds: TrajectoryDataset) -> np.ndarray:
    """Posterior expected utility of Stop1/Stop2 given only the observed summary."""
    if ds.env_id == "example2":
        return terminal_utilities(ds)
    cfg = ds.config
    t, k = ds.times, ds.summary[..., 1]
    return np.stack([example1.expected_terminal_utility(t, k, Action.STOP1, cfg),
                     example1.expected_terminal_utility(t, k, Action.STOP2, cfg)], axis=-1)


SCORINGS = ("drawn", "posterior")


def scored_utilities(ds: TrajectoryDataset, scoring: str = "drawn") -> np.ndarray:
    """Terminal utilities under the chosen scoring.

    ``"drawn"`` scores Example 1 against each episode's sampled theta.
    ``"posterior"`` replaces that by its conditional expectation given the
    observed history; both have the same mean, the latter a smaller variance.
    """
    if scoring == "drawn":
        return terminal_utilities(ds)
    if scoring == "posterior":
        return expected_terminal_values(ds)
    raise ValueError(f"scoring must be one of {SCORINGS}, got {scoring!r}")


def forced_stop_actions(ds: TrajectoryDataset) -> np.ndarray:
    """Terminal argmax (ties to Stop1) used when a policy is still continuing at t_max."""
    ev = expected_terminal_values(ds)[:, -1]
    return np.where(ev[:, 1] > ev[:, 0], int(Action.STOP2), int(Action.STOP1))


def evaluate_decisions(ds: TrajectoryDataset, decisions: np.ndarray,
                       term_utils: np.ndarray | None = None) -> PolicyValue:
    """Walk each trajectory to its first non-Continue decision and score it."""
    decisions = np.asarray(decisions, dtype=np.int64).copy()
    if decisions.shape != (ds.m, ds.t_max):
        raise ValueError(f"decisions shape {decisions.shape} != {(ds.m, ds.t_max)}")
    last = decisions[:, -1]
    decisions[:, -1] = np.where(last == Action.CONTINUE, forced_stop_actions(ds), last)
    if term_utils is None:
        term_utils = terminal_utilities(ds)
    stops = decisions != Action.CONTINUE
    idx = np.argmax(stops, axis=1)
    rows = np.arange(ds.m)
    act = decisions[rows, idx]
    u = term_utils[rows, idx, act - 1]
    se = float(u.std(ddof=1) / np.sqrt(u.size)) if u.size > 1 else 0.0
    return PolicyValue(float(u.mean()), se, u, idx + 1, act)


def constant_decisions(ds: TrajectoryDataset, action) -> np.ndarray:
    return np.full((ds.m, ds.t_max), int(action), dtype=np.int64)


def stop_immediately_decisions(ds: TrajectoryDataset) -> np.ndarray:
    """Stop at the first decision point with the better-looking terminal action."""
    ev = expected_terminal_values(ds)
    d = np.zeros((ds.m, ds.t_max), dtype=np.int64)
    d[:, 0] = np.where(ev[:, 0, 1] > ev[:, 0, 0], int(Action.STOP2), int(Action.STOP1))
    return d


def exact_policy_decisions(ds: TrajectoryDataset, solution: example1.ExactSolution) -> np.ndarray:
    """Example 1 exact-DP policy applied along each stored trajectory."""
    k = ds.summary[..., 1].astype(np.int64)
    return solution.policy[ds.times, k]
