"""Constrained backward induction on a grid over the summary statistic.

Each grid cell ``j`` collects the (episode, step) pairs of the forward
simulation that land in it.  Stopping values are membership averages of the
realised terminal utility; the continuation value is the membership average
of the value of each member's successor cell under the current policy.
Policies are re-argmaxed after every order class and sweeps repeat until no
cell changes its action.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Action
from .evaluation import scored_utilities
from .forward_sim import GridSpec, TrajectoryDataset

log = logging.getLogger(__name__)

UNVISITED = -1


@dataclass
class Membership:
    """Flattened membership index: member ``i`` is (episode, step) in ``cell[i]``."""

    cell: np.ndarray          # (M*T,) cell of each member
    t: np.ndarray             # (M*T,) step 1..T of each member
    successor: np.ndarray     # (M*T,) flat index of the next member, -1 at t_max
    counts: np.ndarray        # (n_cells,)
    t_max: int

    def members(self, cell: int) -> np.ndarray:
        return np.flatnonzero(self.cell == cell)


@dataclass
class GridValuePolicy:
    """Û(j, d), their Monte Carlo standard errors, and the argmax policy."""

    grid: GridSpec
    value: np.ndarray        # (n_cells, 3); NaN unvisited, -inf for masked Continue
    value_se: np.ndarray     # (n_cells, 3)
    policy: np.ndarray       # (n_cells,); -1 for unvisited cells
    counts: np.ndarray
    order_key: np.ndarray    # row index (sweep order class) of each cell
    iterations: int = 0
    converged: bool = False
    trace: list = field(default_factory=list)

    @property
    def visited(self) -> np.ndarray:
        return self.counts > 0

    def lookup_cells(self, cells) -> np.ndarray:
        """Map cells to themselves if visited, else the nearest visited cell in the same row.

        Rows without any visited cell fall back to the nearest visited row.
        Column ties resolve to the lower column.
        """
        cells = np.asarray(cells)
        ncol = self.grid.col.n
        nrow = self.grid.row.n
        vis = self.visited.reshape(nrow, ncol)
        table = np.arange(self.grid.n_cells).reshape(nrow, ncol).copy()
        rows_with = np.flatnonzero(vis.any(axis=1))
        if rows_with.size == 0:
            raise ValueError("policy table has no visited cells")
        for r in range(nrow):
            src = r if vis[r].any() else rows_with[np.argmin(np.abs(rows_with - r))]
            cols = np.flatnonzero(vis[src])
            near = cols[np.argmin(np.abs(cols[None, :] - np.arange(ncol)[:, None]), axis=1)]
            table[r] = src * ncol + near
        return table.reshape(-1)[cells]

    def decisions(self, ds: TrajectoryDataset) -> np.ndarray:
        """Policy applied along every stored trajectory of ``ds``."""
        return self.policy[self.lookup_cells(ds.cells())]

    def table_rows(self):
        """Rows for the CSV export: coordinates, centres, three values, argmax, count."""
        r, c = self.grid.coords(np.arange(self.grid.n_cells))
        rc, cc = self.grid.centers(np.arange(self.grid.n_cells))
        for j in range(self.grid.n_cells):
            yield (j, int(r[j]), int(c[j]), float(rc[j]), float(cc[j]),
                   *(float(v) for v in self.value[j]), int(self.policy[j]), int(self.counts[j]))


TABLE_COLUMNS = ("cell", "row", "col", "row_center", "col_center",
                 "u_continue", "u_stop1", "u_stop2", "action", "count")


def build_membership(ds: TrajectoryDataset, grid: GridSpec | None = None) -> Membership:
    grid = grid or ds.grid
    r, c = ds.grid_rows_cols()
    cells = grid.cell(r, c).reshape(-1)
    T = ds.t_max
    flat = np.arange(ds.m * T)
    t = np.tile(np.arange(1, T + 1), ds.m)
    succ = np.where(t < T, flat + 1, -1)
    counts = np.bincount(cells, minlength=grid.n_cells)
    return Membership(cells, t, succ, counts, T)


def _cell_mean_se(cells, values, n_cells):
    n = np.bincount(cells, minlength=n_cells).astype(float)
    s = np.bincount(cells, weights=values, minlength=n_cells)
    ss = np.bincount(cells, weights=values * values, minlength=n_cells)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = s / n
        var = np.maximum(ss / n - mean * mean, 0.0) * n / (n - 1)
        se = np.sqrt(var / n)
    se[n < 2] = np.inf
    mean[n == 0] = np.nan
    return mean, se


def terminal_values(ds: TrajectoryDataset, membership: Membership, scoring: str = "drawn"):
    """Membership averages (and SEs) of the Stop1/Stop2 utilities of the members."""
    tu = scored_utilities(ds, scoring).reshape(-1, 2)
    n_cells = membership.counts.size
    value = np.full((n_cells, 3), np.nan)
    se = np.full((n_cells, 3), np.nan)
    for d in (0, 1):
        value[:, d + 1], se[:, d + 1] = _cell_mean_se(membership.cell, tu[:, d], n_cells)
    return value, se


def _initial_policy(value: np.ndarray, counts: np.ndarray) -> np.ndarray:
    pol = np.where(value[:, 2] > value[:, 1], int(Action.STOP2), int(Action.STOP1))
    pol[counts == 0] = UNVISITED
    return pol


def _argmax_policy(value_rows: np.ndarray) -> np.ndarray:
    # NaN/-inf Continue never wins; ties go to the lowest action index
    v = np.where(np.isnan(value_rows), -np.inf, value_rows)
    return np.argmax(v, axis=1)


class _SweepPlan:
    """Per order class: which continuation members and cells it touches."""

    def __init__(self, gvp: GridValuePolicy, mem: Membership, order: str):
        nrow = gvp.grid.row.n
        self.cont = np.flatnonzero(mem.successor >= 0)
        member_row = gvp.order_key[mem.cell[self.cont]]
        self.by_row = [self.cont[member_row == r] for r in range(nrow)]
        self.cells_by_row = [np.flatnonzero((gvp.order_key == r) & gvp.visited) for r in range(nrow)]
        self.rows = list(range(nrow))
        if order == "descending":
            self.rows.reverse()


def _default_order(ds: TrajectoryDataset) -> str:
    # Example 1 works back from the horizon; Example 2 from the smallest sd
    return "descending" if ds.env_id == "example1" else "ascending"


def sweep(gvp: GridValuePolicy, ds: TrajectoryDataset, mem: Membership, order: str | None = None,
          _plan: _SweepPlan | None = None) -> int:
    """One pass over all order classes; returns the number of cells whose action changed."""
    plan = _plan or _SweepPlan(gvp, mem, order or _default_order(ds))
    n_cells = gvp.grid.n_cells
    T = mem.t_max
    changed = 0
    for r in plan.rows:
        members = plan.by_row[r]
        cells = plan.cells_by_row[r]
        if cells.size == 0:
            continue
        if members.size:
            succ = mem.successor[members]
            sc = mem.cell[succ]
            v = gvp.value[sc]
            best_any = v[np.arange(sc.size), gvp.policy[sc]]
            # successors at the horizon are forced to stop
            best_term = np.maximum(v[:, 1], v[:, 2])
            sval = np.where(mem.t[succ] == T, best_term, best_any)
            mean, se = _cell_mean_se(mem.cell[members], sval, n_cells)
            has = np.isfinite(mean[cells])
            gvp.value[cells, 0] = np.where(has, mean[cells], -np.inf)
            gvp.value_se[cells, 0] = np.where(has, se[cells], np.nan)
        else:
            gvp.value[cells, 0] = -np.inf
        new = _argmax_policy(gvp.value[cells])
        changed += int(np.sum(new != gvp.policy[cells]))
        gvp.policy[cells] = new
    return changed


@dataclass(frozen=True)
class SolveOptions:
    max_iter: int = 100
    change_threshold: int = 0
    order: str | None = None   # "ascending" / "descending" over grid rows; None = per-example default
    scoring: str = "drawn"     # see evaluation.scored_utilities


def initialise(ds: TrajectoryDataset, mem: Membership, grid: GridSpec | None = None,
               scoring: str = "drawn") -> GridValuePolicy:
    grid = grid or ds.grid
    value, se = terminal_values(ds, mem, scoring)
    value[:, 0] = np.nan
    pol = _initial_policy(value, mem.counts)
    order_key = np.arange(grid.n_cells) // grid.col.n
    return GridValuePolicy(grid, value, se, pol, mem.counts.copy(), order_key)


def solve(ds: TrajectoryDataset, config=None, grid: GridSpec | None = None,
          options: SolveOptions = SolveOptions()) -> GridValuePolicy:
    """Iterate sweeps from the all-terminal initial policy until the policy is stable."""
    if config is not None:
        ds.require(config)
    mem = build_membership(ds, grid)
    gvp = initialise(ds, mem, grid, options.scoring)
    plan = _SweepPlan(gvp, mem, options.order or _default_order(ds))
    for it in range(1, options.max_iter + 1):
        changed = sweep(gvp, ds, mem, _plan=plan)
        gvp.trace.append(changed)
        gvp.iterations = it
        # the first sweep only fills in continuation values
        if it > 1 and changed <= options.change_threshold:
            gvp.converged = True
            break
    if not gvp.converged:
        log.warning("backward induction did not converge in %d sweeps (last change count %d)",
                    options.max_iter, gvp.trace[-1])
    return gvp


def continuation_residual(gvp: GridValuePolicy, ds: TrajectoryDataset, mem: Membership | None = None) -> float:
    """Largest |Û(j,0) - mean successor value| over cells with continuation members."""
    mem = mem or build_membership(ds, gvp.grid)
    cont = np.flatnonzero(mem.successor >= 0)
    succ = mem.successor[cont]
    sc = mem.cell[succ]
    v = gvp.value[sc]
    best = np.where(mem.t[succ] == mem.t_max, np.maximum(v[:, 1], v[:, 2]),
                    v[np.arange(sc.size), gvp.policy[sc]])
    n_cells = gvp.grid.n_cells
    mean = np.bincount(mem.cell[cont], weights=best, minlength=n_cells) / \
        np.maximum(np.bincount(mem.cell[cont], minlength=n_cells), 1)
    has = np.bincount(mem.cell[cont], minlength=n_cells) > 0
    return float(np.max(np.abs(gvp.value[has, 0] - mean[has]))) if has.any() else 0.0
