"""Parametric stopping boundaries and their optimisation.

A boundary family turns the sequential problem into a static one: each
parameter value defines a deterministic stopping rule, its expected utility
is estimated by truncating the stored forward trajectories, and the best
parameter is read off a quadratic response surface fitted over a grid.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import Action
from .evaluation import PolicyValue, evaluate_decisions, scored_utilities
from . import example1, example2
from .example1 import Ex1Summary
from .example2 import Ex2Summary
from .forward_sim import TrajectoryDataset


@dataclass(frozen=True)
class Ex1Boundary:
    """Funnel ``w1(t) = phi r(t)``, ``w2(t) = 1 - (1 - phi) r(t)`` with r(t) = sqrt((t-1)/(T-1))."""

    phi: float

    def __post_init__(self):
        if not 0.0 < self.phi < 1.0:
            raise ValueError(f"phi must lie in (0, 1), got {self.phi}")

    @property
    def params(self) -> tuple[float, ...]:
        return (self.phi,)


@dataclass(frozen=True)
class Ex2Boundary:
    """Wedge ``w1(s) = -b1 s + c`` (below: Stop1), ``w2(s) = b2 s + c`` (above: Stop2)."""

    b1: float
    b2: float
    c: float

    def __post_init__(self):
        if self.b1 < 0 or self.b2 < 0:
            raise ValueError("boundary slopes must be non-negative")

    @property
    def params(self) -> tuple[float, ...]:
        return (self.b1, self.b2, self.c)


def _time_ratio(t, t_max: int):
    t = np.asarray(t, dtype=float)
    if t_max <= 1:
        return np.ones_like(t)
    return np.sqrt(np.maximum(t - 1.0, 0.0) / (t_max - 1.0))


def ex1_bounds(t, phi: float, t_max: int):
    r = _time_ratio(t, t_max)
    lower = phi * r
    # algebraically 1 - (1 - phi) r; this form cannot round below ``lower`` when r = 1
    return lower, lower + (1.0 - r)


def _rule(x, lower, upper):
    # strict inequalities; equality continues
    return np.where(x < lower, int(Action.STOP1), np.where(x > upper, int(Action.STOP2), int(Action.CONTINUE)))


def _forced_ex1(t, k, config) -> Action:
    u1 = example1.expected_terminal_utility(t, k, Action.STOP1, config)
    u2 = example1.expected_terminal_utility(t, k, Action.STOP2, config)
    return Action.STOP2 if u2 > u1 else Action.STOP1


def decide_ex1(summary: Ex1Summary, boundary: Ex1Boundary, config: example1.Ex1Config) -> Action:
    """Funnel rule at ``summary``; a Continue at the horizon becomes the terminal argmax."""
    if summary.t < 1:
        raise ValueError("decisions start after the first outcome (t >= 1)")
    w1, w2 = ex1_bounds(summary.t, boundary.phi, config.t_max)
    a = Action(int(_rule(summary.p, w1, w2)))
    if a == Action.CONTINUE and summary.t >= config.t_max:
        a = _forced_ex1(summary.t, summary.successes_k, config)
    return a


def decide_ex2(summary: Ex2Summary, boundary: Ex2Boundary, t: int | None = None,
               config: example2.Ex2Config | None = None) -> Action:
    """Wedge rule; with ``t`` and ``config`` given, a Continue at the horizon becomes the terminal argmax."""
    s, m = summary.delta95_sd, summary.delta95_mean
    a = Action(int(_rule(m, -boundary.b1 * s + boundary.c, boundary.b2 * s + boundary.c)))
    if a == Action.CONTINUE and t is not None and config is not None and t >= config.t_max:
        u1 = example2.terminal_utility(summary, Action.STOP1, t, config)
        u2 = example2.terminal_utility(summary, Action.STOP2, t, config)
        a = Action.STOP2 if u2 > u1 else Action.STOP1
    return a


def boundary_decisions(ds: TrajectoryDataset, boundary) -> np.ndarray:
    """Decision matrix of a boundary rule along every stored trajectory.

    Continue at the horizon is resolved later by ``evaluate_decisions``.
    """
    if isinstance(boundary, Ex1Boundary):
        if ds.env_id != "example1":
            raise ValueError("Ex1Boundary needs an Example 1 dataset")
        w1, w2 = ex1_bounds(ds.times, boundary.phi, ds.t_max)
        return _rule(ds.summary[..., 0], w1, w2)
    if ds.env_id != "example2":
        raise ValueError("Ex2Boundary needs an Example 2 dataset")
    m, s = ds.summary[..., 0], ds.summary[..., 1]
    return _rule(m, -boundary.b1 * s + boundary.c, boundary.b2 * s + boundary.c)


DEFAULT_SCORING = "posterior"


def evaluate_policy_value(ds: TrajectoryDataset, boundary, config=None, term_utils: np.ndarray | None = None,
                          scoring: str = DEFAULT_SCORING) -> PolicyValue:
    """Monte Carlo utility of a boundary rule by truncating each trajectory at its first stop.

    Example 1 is scored by posterior expected utility unless ``scoring="drawn"``.
    """
    if config is not None:
        ds.require(config)
    if term_utils is None:
        term_utils = scored_utilities(ds, scoring)
    return evaluate_decisions(ds, boundary_decisions(ds, boundary), term_utils)


def make_boundary(env_id: str, params):
    return Ex1Boundary(*params) if env_id == "example1" else Ex2Boundary(*params)


@dataclass
class GridSearchResult:
    params: np.ndarray        # (n_nodes, p)
    value: np.ndarray         # (n_nodes,)
    se: np.ndarray            # (n_nodes,)
    names: tuple[str, ...]

    @property
    def best_index(self) -> int:
        return int(np.argmax(self.value))


def default_grid(env_id: str, n: int | None = None):
    """Parameter nodes: 33 values of phi on [0.02, 0.98] or 10^3 nodes over [0,3]^2 x [0,1]."""
    if env_id == "example1":
        return np.linspace(0.02, 0.98, n or 33)[:, None]
    n = n or 10
    axes = (np.linspace(0.0, 3.0, n), np.linspace(0.0, 3.0, n), np.linspace(0.0, 1.0, n))
    return np.array(list(itertools.product(*axes)))


def grid_search(ds: TrajectoryDataset, config=None, nodes=None, workers: int = 1,
                scoring: str = DEFAULT_SCORING) -> GridSearchResult:
    """Evaluate the boundary utility at every parameter node on one shared dataset."""
    if config is not None:
        ds.require(config)
    nodes = np.atleast_2d(np.asarray(default_grid(ds.env_id) if nodes is None else nodes, dtype=float))
    if nodes.size == 0:
        raise ValueError("parameter grid is empty")
    tu = scored_utilities(ds, scoring)

    def one(p):
        pv = evaluate_policy_value(ds, make_boundary(ds.env_id, p), term_utils=tu)
        return pv.mean, pv.se

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, nodes))
    else:
        out = [one(p) for p in nodes]
    names = ("phi",) if ds.env_id == "example1" else ("b1", "b2", "c")
    return GridSearchResult(nodes, np.array([o[0] for o in out]), np.array([o[1] for o in out]), names)


@dataclass
class ResponseSurface:
    """f(x) = intercept + linear . x + x' quad x with ``quad`` symmetric."""

    intercept: float
    linear: np.ndarray
    quad: np.ndarray

    def __call__(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = self.intercept + x @ self.linear + np.einsum("ni,ij,nj->n", x, self.quad, x)
        return out

    @property
    def negative_definite(self) -> bool:
        return bool(np.all(np.linalg.eigvalsh(self.quad) < 0))

    def stationary_point(self) -> np.ndarray:
        return np.linalg.solve(-2.0 * self.quad, self.linear)

    def coefficient_rows(self):
        p = self.linear.size
        yield ("intercept", "", self.intercept)
        for i in range(p):
            yield ("linear", str(i), float(self.linear[i]))
        for i in range(p):
            for j in range(i, p):
                yield ("quad", f"{i},{j}", float(self.quad[i, j]))


@dataclass
class FitResult:
    optimum: np.ndarray
    surface: ResponseSurface
    fallback: bool
    diagnostics: dict = field(default_factory=dict)


class RankDeficientDesign(ValueError):
    pass


def _quad_design(x: np.ndarray):
    n, p = x.shape
    cols = [np.ones(n)] + [x[:, i] for i in range(p)]
    pairs = [(i, j) for i in range(p) for j in range(i, p)]
    cols += [x[:, i] * x[:, j] for i, j in pairs]
    return np.column_stack(cols), pairs


def fit_quadratic(params, values) -> ResponseSurface:
    x = np.atleast_2d(np.asarray(params, dtype=float))
    if x.shape[0] == 1 and np.ndim(params) == 1:
        x = x.T
    y = np.asarray(values, dtype=float)
    n, p = x.shape
    need = (p + 1) * (p + 2) // 2
    if n < need:
        raise RankDeficientDesign(f"{n} nodes cannot determine a {p}-parameter quadratic ({need} coefficients)")
    X, pairs = _quad_design(x)
    # columns scaled to unit norm before the rank check
    norms = np.linalg.norm(X, axis=0)
    norms[norms == 0] = 1.0
    rank = np.linalg.matrix_rank(X / norms)
    if rank < X.shape[1]:
        flat = [i for i in range(p) if np.ptp(x[:, i]) == 0]
        detail = f"parameters {flat} take a single value" if flat else "nodes do not span a quadratic"
        raise RankDeficientDesign(f"quadratic design has rank {rank} < {X.shape[1]}: {detail}")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return _surface_from_coef(coef, p, pairs)


def _surface_from_coef(coef, p, pairs) -> ResponseSurface:
    quad = np.zeros((p, p))
    for c, (i, j) in zip(coef[1 + p:], pairs):
        if i == j:
            quad[i, i] = c
        else:
            quad[i, j] = quad[j, i] = c / 2.0
    return ResponseSurface(float(coef[0]), np.array(coef[1:1 + p], dtype=float), quad)


def stationary_point_se(params, values) -> np.ndarray:
    """Delta-method standard errors of the fitted stationary point.

    Uses the least-squares coefficient covariance ``s^2 (X'X)^-1`` and a
    central-difference Jacobian of the stationary point in the coefficients.
    NaN when there are no residual degrees of freedom.
    """
    x = np.asarray(params, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    y = np.asarray(values, dtype=float)
    X, pairs = _quad_design(x)
    n, k = X.shape
    p = x.shape[1]
    if n <= k:
        return np.full(p, np.nan)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    s2 = float(np.sum((y - X @ coef) ** 2)) / (n - k)
    cov = s2 * np.linalg.pinv(X.T @ X)
    jac = np.zeros((p, k))
    for i in range(k):
        h = 1e-6 * max(1.0, abs(coef[i]))
        up, down = coef.copy(), coef.copy()
        up[i] += h
        down[i] -= h
        jac[:, i] = (_surface_from_coef(up, p, pairs).stationary_point()
                     - _surface_from_coef(down, p, pairs).stationary_point()) / (2 * h)
    return np.sqrt(np.maximum(np.diag(jac @ cov @ jac.T), 0.0))


def local_nodes(params: np.ndarray, values: np.ndarray, window: int) -> np.ndarray:
    """Mask of nodes within ``window`` grid steps of the best node along every axis.

    A best node on the edge of the grid shifts the window inwards, so each
    axis keeps ``2 window + 1`` levels whenever the grid has that many.
    """
    best = params[int(np.argmax(values))]
    keep = np.ones(len(params), dtype=bool)
    for i in range(params.shape[1]):
        levels = np.unique(params[:, i])
        pos = np.searchsorted(levels, params[:, i])
        centre = int(np.clip(np.searchsorted(levels, best[i]), window, max(len(levels) - 1 - window, window)))
        keep &= np.abs(pos - centre) <= window
    return keep


def fit_and_maximize(result_or_params, values=None, window: int | None = None) -> FitResult:
    """Least-squares quadratic and its maximiser, falling back to the best node.

    With ``window`` set, only nodes within that many grid steps of the best
    node enter the fit (a local response surface).  Fallback happens when the
    quadratic form is not negative definite or the stationary point lies
    outside the bounding box of the fitted nodes.
    """
    if isinstance(result_or_params, GridSearchResult):
        params, values = result_or_params.params, result_or_params.value
    else:
        params = np.asarray(result_or_params, dtype=float)
        if params.ndim == 1:
            params = params[:, None]
    values = np.asarray(values, dtype=float)
    if window is not None:
        keep = local_nodes(params, values, window)
        params, values = params[keep], values[keep]
    surface = fit_quadratic(params, values)
    lo, hi = params.min(axis=0), params.max(axis=0)
    best = params[int(np.argmax(values))]
    diag = {"negative_definite": surface.negative_definite, "best_node": best.tolist(),
            "best_node_value": float(values.max()), "n_fit_nodes": int(len(values))}
    if not surface.negative_definite:
        diag["reason"] = "quadratic form not negative definite"
        return FitResult(best.copy(), surface, True, diag)
    x_star = surface.stationary_point()
    diag["stationary_point"] = x_star.tolist()
    if np.any(x_star < lo) or np.any(x_star > hi):
        diag["reason"] = "stationary point outside the grid bounding box"
        return FitResult(best.copy(), surface, True, diag)
    diag["surface_value"] = float(surface(x_star)[0])
    diag["optimum_se"] = stationary_point_se(params, values).tolist()
    return FitResult(x_star, surface, False, diag)


def default_window(env_id: str) -> int | None:
    """Example 1's one-dimensional curve is fitted globally; Example 2's surface has
    cliffs at small slopes and small c, so only the 3x3x3 block around the best node is fitted."""
    return None if env_id == "example1" else 1


def optimise(ds: TrajectoryDataset, config=None, nodes=None, workers: int = 1, scoring: str = DEFAULT_SCORING,
             window: int | None | str = "auto"):
    """Grid search, quadratic fit, and the fitted optimum's own Monte Carlo value."""
    gs = grid_search(ds, config, nodes, workers, scoring)
    fit = fit_and_maximize(gs, window=default_window(ds.env_id) if window == "auto" else window)
    opt = make_boundary(ds.env_id, tuple(float(v) for v in fit.optimum))
    return gs, fit, opt, evaluate_policy_value(ds, opt, scoring=scoring)

