"""Follow-up pivotal trial: sample size and predictive rejection probability.

The pivotal trial randomises N/2 patients to placebo and N/2 to the
estimated ED95 and rejects H0 when the standardised difference of arm means
exceeds the one-sided normal cutoff.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .core import ConfigError

# Acklam's rational approximation to the normal quantile (rel. error ~1.15e-9),
# followed by one Halley step against erfc, which brings it to ~1e-15.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425
_SQRT2 = math.sqrt(2.0)
_SQRT2PI = math.sqrt(2.0 * math.pi)


def normal_cdf(x):
    """Standard normal CDF; accepts scalars or arrays."""
    out = 0.5 * special.erfc(-np.asarray(x, dtype=float) / _SQRT2)
    return float(out) if np.ndim(out) == 0 else out


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
            ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
        (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF for ``0 < p < 1``."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile requires 0 < p < 1, got {p!r}")
    x = _acklam(p)
    # Halley refinement; the residual is taken in the tail that keeps precision
    if p < 0.5:
        e = 0.5 * math.erfc(-x / _SQRT2) - p
    else:
        e = -(0.5 * math.erfc(x / _SQRT2) - (1.0 - p))
    u = e * _SQRT2PI * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def upper_cutoff(alpha: float) -> float:
    """Right-tail cutoff q_alpha with P(Z > q_alpha) = alpha."""
    return -normal_quantile(alpha)


@dataclass(frozen=True)
class PivotalConfig:
    alpha: float = 0.05
    beta: float = 0.2
    delta_floor: float = 0.05
    n_max: int = 2000

    def __post_init__(self):
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ConfigError("alpha and beta must lie in (0, 1)")
        if self.delta_floor <= 0:
            raise ConfigError("delta_floor must be positive")
        if self.n_max < 2 or self.n_max % 2:
            raise ConfigError("n_max must be an even integer >= 2")


@dataclass(frozen=True)
class PivotalResult:
    n_total: int
    delta_star: float
    rejection_prob: float


def sample_size_bound(delta_star, alpha: float, beta: float):
    """Real-valued lower bound 4((q_a + q_b)/delta*)^2 on the total sample size."""
    z = upper_cutoff(alpha) + upper_cutoff(beta)
    return 4.0 * (z / np.asarray(delta_star, dtype=float)) ** 2


def sample_size(delta95_mean, delta95_sd, alpha: float = 0.05, beta: float = 0.2,
                config: PivotalConfig | None = None):
    """Smallest even N meeting the power requirement at delta* = mean - sd.

    delta* is floored at ``config.delta_floor`` and N capped at ``config.n_max``.
    Works elementwise on arrays.
    """
    cfg = config or PivotalConfig(alpha=alpha, beta=beta)
    dstar = np.maximum(np.asarray(delta95_mean, float) - np.asarray(delta95_sd, float), cfg.delta_floor)
    bound = sample_size_bound(dstar, alpha, beta)
    # relative slack absorbs round-off when the bound is an exact even integer
    half = np.ceil(bound * (1.0 - 1e-12) / 2.0)
    n = np.clip(2.0 * half, 2.0, float(cfg.n_max)).astype(np.int64)
    return int(n) if n.ndim == 0 else n


def rejection_prob(delta95_mean, delta95_sd, n_total, alpha: float = 0.05):
    """Posterior predictive probability that the pivotal trial rejects H0."""
    n4 = np.asarray(n_total, dtype=float) / 4.0
    if np.any(n4 < 0.5):
        raise ValueError("n_total must be >= 2")
    m = np.asarray(delta95_mean, dtype=float)
    s = np.asarray(delta95_sd, dtype=float)
    z = (m * np.sqrt(n4) - upper_cutoff(alpha)) / np.sqrt(1.0 + n4 * s * s)
    return normal_cdf(z)


def pivotal(delta95_mean: float, delta95_sd: float, config: PivotalConfig | None = None) -> PivotalResult:
    cfg = config or PivotalConfig()
    n = sample_size(delta95_mean, delta95_sd, cfg.alpha, cfg.beta, cfg)
    dstar = max(delta95_mean - delta95_sd, cfg.delta_floor)
    return PivotalResult(n, dstar, float(rejection_prob(delta95_mean, delta95_sd, n, cfg.alpha)))
