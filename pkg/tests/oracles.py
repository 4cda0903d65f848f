"""Independent reference computations used by the tests.

Nothing here imports the package: each function recomputes its quantity
from first principles so that agreement is meaningful.
"""

from fractions import Fraction
from functools import lru_cache

import mpmath
import numpy as np


def ex1_history_values(theta1=Fraction(2, 5), theta2=Fraction(3, 5), c=1, K=100, T=10):
    """Exact expectimax over full outcome histories (not the (t, k) lattice).

    Returns ``(optimal_value, cont)`` where ``cont(history)`` is the exact
    expected utility of continuing once more and then acting optimally.
    """

    def post1(hist):
        l1 = l2 = Fraction(1)
        for y in hist:
            l1 *= theta1 if y else 1 - theta1
            l2 *= theta2 if y else 1 - theta2
        return l1 / (l1 + l2)

    def stops(hist):
        t, p1 = len(hist), post1(hist)
        return -c * t - K * (1 - p1), -c * t - K * p1

    @lru_cache(maxsize=None)
    def cont(hist):
        p1 = post1(hist)
        pred = p1 * theta1 + (1 - p1) * theta2
        return pred * value(hist + (1,)) + (1 - pred) * value(hist + (0,))

    @lru_cache(maxsize=None)
    def value(hist):
        s1, s2 = stops(hist)
        if len(hist) == T:
            return max(s1, s2)
        if not hist:
            return cont(hist)
        return max(cont(hist), s1, s2)

    return value(()), cont, stops


def phi_mp(x, dps=50):
    with mpmath.workdps(dps):
        return mpmath.ncdf(x)


def quantile_mp(p, dps=50):
    """Inverse normal CDF by root finding on the log of the mpmath CDF."""
    with mpmath.workdps(dps):
        p = mpmath.mpf(p)
        if p <= 0.5:
            start = -mpmath.sqrt(-2 * mpmath.log(p)) if p < 0.01 else mpmath.mpf(-1)
            return mpmath.findroot(lambda x: mpmath.log(mpmath.ncdf(x)) - mpmath.log(p), start)
        return -quantile_mp(1 - p, dps)


def ex2_delta95_quadrature(doses, responses, prior_mean=(0.5, 1.0), prior_sd=(1.0, 1.0), q_min=0.1,
                           sigma=1.0, nb=200, nq=200, b_range=None, q_hi=8.0):
    """Posterior mean and sd of 0.95 b by a tensor-product trapezoid rule on (b, q).

    The q prior is a normal truncated below at ``q_min``; the b range spans
    the prior plus any likelihood mass.
    """
    x = np.asarray(doses, dtype=float)
    y = np.asarray(responses, dtype=float)
    if b_range is None:
        b_range = (prior_mean[0] - 6 * prior_sd[0], prior_mean[0] + 6 * prior_sd[0])
    b = np.linspace(*b_range, nb)
    q = np.linspace(q_min, q_hi, nq)
    B, Q = np.meshgrid(b, q, indexing="ij")
    lp = -0.5 * ((B - prior_mean[0]) / prior_sd[0]) ** 2 - 0.5 * ((Q - prior_mean[1]) / prior_sd[1]) ** 2
    for xi, yi in zip(x, y):
        lp = lp - 0.5 * ((yi - B * xi / (Q + xi)) / sigma) ** 2
    w = np.exp(lp - lp.max())
    wb = np.ones(nb)
    wb[[0, -1]] = 0.5
    wq = np.ones(nq)
    wq[[0, -1]] = 0.5
    w = w * wb[:, None] * wq[None, :]
    w /= w.sum()
    m = float((w * B).sum())
    v = float((w * B * B).sum()) - m * m
    return 0.95 * m, 0.95 * np.sqrt(v)
