"""Emax dose-finding trial.

Outcomes follow ``y = a + b x^r / (q^r + x^r) + N(0, sigma^2)`` with ``a``,
``r`` and ``sigma`` known.  The posterior over ``(b, q)`` is kept as a
mixture: a grid over ``q`` carrying marginal posterior mass, and for each
node the conjugate normal conditional of ``b``.  Given ``q`` the model is
linear in ``b``, so each node needs only the running sums ``sum g^2`` and
``sum g*y`` with ``g = x / (q + x)``.
"""

from __future__ import annotations

import functools
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import Action, ConfigError, NumericalError, StoppingEnv, UsageError
from .pivotal import PivotalConfig, rejection_prob, sample_size

ED_FRACTION = 0.95
# x/(q+x) = 0.95  <=>  x = 19 q
ED95_MULTIPLIER = ED_FRACTION / (1.0 - ED_FRACTION)


@dataclass(frozen=True)
class Ex2Config:
    a: float = 0.0
    r: float = 1.0
    sigma: float = 1.0
    prior_mean: tuple[float, float] = (0.5, 1.0)
    prior_sd: tuple[float, float] = (1.0, 1.0)
    q_min: float = 0.1
    dose_step: float = 1.0
    dose_max: float = 10.0
    cost_c1: float = 1.0
    cost_c2: float = 1.0
    prize_K: float = 100.0
    alpha: float = 0.05
    beta: float = 0.2
    delta_floor: float = 0.05
    n_max: int = 2000
    t_max: int = 50
    q_hi: float = 8.0
    n_q: int = 200

    def __post_init__(self):
        object.__setattr__(self, "prior_mean", tuple(float(v) for v in self.prior_mean))
        object.__setattr__(self, "prior_sd", tuple(float(v) for v in self.prior_sd))
        if self.sigma <= 0 or min(self.prior_sd) <= 0:
            raise ConfigError("sigma and prior sds must be positive")
        if self.q_min <= 0 or self.q_hi <= self.q_min:
            raise ConfigError("need 0 < q_min < q_hi")
        if self.dose_step <= 0 or self.dose_max <= 0:
            raise ConfigError("dose_step and dose_max must be positive")
        if self.r != 1.0:
            raise ConfigError("only r = 1 is supported (closed-form ED95)")
        if int(self.t_max) != self.t_max or self.t_max < 1:
            raise ConfigError("t_max must be a positive integer")
        if self.n_q < 2:
            raise ConfigError("n_q must be at least 2")
        self.pivotal  # validates alpha, beta, floor and cap

    @property
    def pivotal(self) -> PivotalConfig:
        return PivotalConfig(self.alpha, self.beta, self.delta_floor, self.n_max)


@dataclass(frozen=True)
class EmaxTheta:
    b: float
    q: float


@dataclass
class DoseHistory:
    doses: list[float] = field(default_factory=list)
    responses: list[float] = field(default_factory=list)
    current_dose: float = 0.0

    def append(self, x: float, y: float):
        self.doses.append(float(x))
        self.responses.append(float(y))


@dataclass(frozen=True)
class PosteriorGrid:
    q_nodes: np.ndarray
    q_weights: np.ndarray
    b_mean: np.ndarray
    b_var: np.ndarray

    @property
    def q_mean(self) -> float:
        return float(np.sum(self.q_weights * self.q_nodes))


@dataclass(frozen=True)
class Ex2Summary:
    delta95_mean: float
    delta95_sd: float


def emax_mean(x, theta: EmaxTheta, config: Ex2Config):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("doses must be non-negative")
    xr = x ** config.r
    out = config.a + theta.b * xr / (theta.q ** config.r + xr)
    return float(out) if out.ndim == 0 else out


def ed95_and_delta95(theta: EmaxTheta, config: Ex2Config) -> tuple[float, float]:
    """ED95 dose (clipped to the dose range) and the unclipped ED95 effect 0.95 b."""
    x95 = min(max(ED95_MULTIPLIER * theta.q, 0.0), config.dose_max)
    return x95, ED_FRACTION * theta.b


@functools.lru_cache(maxsize=32)
def _q_grid(config: Ex2Config) -> tuple[np.ndarray, np.ndarray]:
    """Log-spaced q nodes and the log prior mass attached to each node.

    Mass is the truncated-normal density times the trapezoid width, so the
    grid integrates the prior rather than just sampling its density.
    """
    nodes = np.geomspace(config.q_min, config.q_hi, config.n_q)
    width = np.empty_like(nodes)
    gaps = np.diff(nodes)
    width[0] = gaps[0] / 2
    width[-1] = gaps[-1] / 2
    width[1:-1] = (gaps[:-1] + gaps[1:]) / 2
    q0, lq = config.prior_mean[1], config.prior_sd[1]
    log_mass = -0.5 * ((nodes - q0) / lq) ** 2 + np.log(width)
    log_mass -= np.max(log_mass)
    nodes.setflags(write=False)
    log_mass.setflags(write=False)
    return nodes, log_mass


def q_nodes(config: Ex2Config) -> np.ndarray:
    return _q_grid(config)[0]


def design_row(x, config: Ex2Config) -> np.ndarray:
    """g_j(x) = x^r / (q_j^r + x^r) for every node; shape ``x.shape + (n_q,)``."""
    nodes = q_nodes(config)
    x = np.asarray(x, dtype=float)[..., None]
    return x / (nodes + x)


def posterior_from_stats(sgg, sgy, config: Ex2Config):
    """Node weights and conditional moments of b from per-node sufficient sums.

    ``sgg`` and ``sgy`` have shape ``(..., n_q)`` holding ``sum g^2`` and
    ``sum g (y - a)``.  The node log weight is the exact normal marginal
    likelihood of the data given ``q`` plus the log prior mass of the node.
    Terms constant across nodes (``sum y^2``, the Gaussian normaliser) are
    dropped because the weights are normalised.

    Returns ``(weights, b_mean, b_var)``, each shaped like the inputs.
    """
    _, log_prior = _q_grid(config)
    b0, lb = config.prior_mean[0], config.prior_sd[0]
    s2 = config.sigma ** 2
    prec = 1.0 / lb ** 2 + sgg / s2
    h = b0 / lb ** 2 + sgy / s2
    mean = h / prec
    log_ml = 0.5 * h * mean - 0.5 * np.log(lb ** 2 * prec)
    logw = log_ml + log_prior
    logw = logw - np.max(logw, axis=-1, keepdims=True)
    w = np.exp(logw)
    total = np.sum(w, axis=-1, keepdims=True)
    if not np.all(np.isfinite(total)) or np.any(total <= 0):
        raise NumericalError("posterior weights underflowed on every q node")
    return w / total, mean, 1.0 / prec


def posterior_update(history: DoseHistory, config: Ex2Config) -> PosteriorGrid:
    """Grid posterior after the doses/responses in ``history`` (may be empty)."""
    x = np.asarray(history.doses, dtype=float)
    y = np.asarray(history.responses, dtype=float)
    g = design_row(x, config).reshape(len(x), config.n_q)
    sgg = np.sum(g * g, axis=0)
    sgy = np.sum(g * (y - config.a)[:, None], axis=0)
    w, m, v = posterior_from_stats(sgg, sgy, config)
    return PosteriorGrid(q_nodes(config), w, m, v)


def summary_moments(w, m, v):
    """Mixture mean and sd of 0.95 b, vectorised over leading axes."""
    mean_b = np.sum(w * m, axis=-1)
    var_b = np.sum(w * (v + m * m), axis=-1) - mean_b ** 2
    if np.any(var_b < 0):
        warnings.warn("negative mixture variance from round-off; clamped to 0", RuntimeWarning)
        var_b = np.maximum(var_b, 0.0)
    return ED_FRACTION * mean_b, ED_FRACTION * np.sqrt(var_b)


def summarize(posterior: PosteriorGrid) -> Ex2Summary:
    mean, sd = summary_moments(posterior.q_weights, posterior.b_mean, posterior.b_var)
    return Ex2Summary(float(mean), float(sd))


def prior_summary(config: Ex2Config) -> Ex2Summary:
    return summarize(posterior_update(DoseHistory(), config))


def next_dose(current, posterior_q_mean, config: Ex2Config):
    """Escalate by at most one step, never past the current ED95 estimate.

    ``posterior_q_mean`` may be a :class:`PosteriorGrid` or E[q | H_t] itself.
    """
    if isinstance(posterior_q_mean, PosteriorGrid):
        posterior_q_mean = posterior_q_mean.q_mean
    x95_hat = ED95_MULTIPLIER * np.asarray(posterior_q_mean, dtype=float)
    out = np.clip(np.minimum(np.asarray(current, dtype=float) + config.dose_step, x95_hat),
                  0.0, config.dose_max)
    return float(out) if out.ndim == 0 else out


def stop2_payoff(delta95_mean, delta95_sd, config: Ex2Config):
    """-c2 N + K Delta_R; the pivotal-trial part of the Stop2 utility."""
    n = sample_size(delta95_mean, delta95_sd, config.alpha, config.beta, config.pivotal)
    dr = rejection_prob(delta95_mean, delta95_sd, n, config.alpha)
    return -config.cost_c2 * n + config.prize_K * dr


def terminal_utility(summary, action, t, config: Ex2Config):
    """Full design utility of stopping with ``action`` after ``t`` cohorts.

    ``summary`` is an :class:`Ex2Summary` or a ``(mean, sd)`` pair of arrays.
    """
    action = Action(int(action))
    if action == Action.CONTINUE:
        raise UsageError("terminal_utility is defined for stopping actions only")
    if isinstance(summary, Ex2Summary):
        mean, sd = summary.delta95_mean, summary.delta95_sd
    else:
        mean, sd = summary
    base = -config.cost_c1 * np.asarray(t, dtype=float)
    if action == Action.STOP1:
        out = base * np.ones(np.broadcast(np.asarray(mean), base).shape)
    else:
        out = base + stop2_payoff(mean, sd, config)
    return float(out) if np.ndim(out) == 0 else out


def terminal_reward(summary, action, config: Ex2Config):
    """Reward emitted by the stopping step (sampling cost already paid per step)."""
    return terminal_utility(summary, action, 0, config)


def draw_theta(rng: np.random.Generator, config: Ex2Config) -> EmaxTheta:
    b = rng.normal(config.prior_mean[0], config.prior_sd[0])
    while True:
        q = rng.normal(config.prior_mean[1], config.prior_sd[1])
        if q >= config.q_min:
            return EmaxTheta(float(b), float(q))


def draw_episode(rng: np.random.Generator, config: Ex2Config):
    """Prior draw of (b, q) plus standard-normal outcome noise for every step."""
    theta = draw_theta(rng, config)
    return theta, rng.standard_normal(config.t_max)


@dataclass
class Ex2Trajectories:
    """No-stopping trajectories of a batch of episodes.

    Index ``t`` of ``delta95_mean`` / ``delta95_sd`` / ``q_mean`` is the summary
    after ``t`` outcomes (index 0 is the prior); ``doses[:, t-1]`` and
    ``responses[:, t-1]`` are the t-th observation.
    """

    doses: np.ndarray
    responses: np.ndarray
    delta95_mean: np.ndarray
    delta95_sd: np.ndarray
    q_mean: np.ndarray


def simulate_batch(b, q, noise, config: Ex2Config) -> Ex2Trajectories:
    """Run the dose-escalation trial without stopping for every episode at once."""
    b = np.asarray(b, dtype=float)
    q = np.asarray(q, dtype=float)
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    n_ep, t_max = noise.shape
    sgg = np.zeros((n_ep, config.n_q))
    sgy = np.zeros((n_ep, config.n_q))
    doses = np.empty((n_ep, t_max))
    resp = np.empty((n_ep, t_max))
    dmean = np.empty((n_ep, t_max + 1))
    dsd = np.empty((n_ep, t_max + 1))
    qmean = np.empty((n_ep, t_max + 1))
    nodes = q_nodes(config)

    w, m, v = posterior_from_stats(sgg, sgy, config)
    dmean[:, 0], dsd[:, 0] = summary_moments(w, m, v)
    qmean[:, 0] = np.sum(w * nodes, axis=-1)
    x = np.zeros(n_ep)
    for t in range(1, t_max + 1):
        if t > 1:
            x = next_dose(x, qmean[:, t - 1], config)
        y = config.a + b * x / (q + x) + config.sigma * noise[:, t - 1]
        g = design_row(x, config)
        sgg += g * g
        sgy += g * (y - config.a)[:, None]
        doses[:, t - 1] = x
        resp[:, t - 1] = y
        w, m, v = posterior_from_stats(sgg, sgy, config)
        dmean[:, t], dsd[:, t] = summary_moments(w, m, v)
        qmean[:, t] = np.sum(w * nodes, axis=-1)
    return Ex2Trajectories(doses, resp, dmean, dsd, qmean)


class Ex2Env(StoppingEnv):
    """Stepping interface; state vector is ``(t, delta95_mean, delta95_sd)``.

    Implemented by replaying the batch simulator on the episode's own noise,
    so stepping and batch trajectories agree bit for bit.
    """

    def __init__(self, config: Ex2Config):
        super().__init__()
        self.config = config
        self.t_max = config.t_max
        self._traj = None

    def _draw_episode(self, rng):
        return draw_episode(rng, self.config)

    def _reset_summary(self):
        self._traj = simulate_batch([self.theta.b], [self.theta.q], self._noise[None, :], self.config)

    def _observe(self, noise):
        pass  # outcome already in the replayed trajectory at index t

    def _continue_cost(self):
        return self.config.cost_c1

    def _terminal_reward(self, action):
        s = self.summary()
        return terminal_reward((s.delta95_mean, s.delta95_sd), action, self.config)

    def summary(self) -> Ex2Summary:
        return Ex2Summary(float(self._traj.delta95_mean[0, self.t]), float(self._traj.delta95_sd[0, self.t]))

    def state(self) -> np.ndarray:
        s = self.summary()
        return np.array([self.t, s.delta95_mean, s.delta95_sd])

    def history(self) -> DoseHistory:
        h = DoseHistory()
        for i in range(self.t):
            h.append(self._traj.doses[0, i], self._traj.responses[0, i])
        h.current_dose = h.doses[-1] if h.doses else 0.0
        return h
