import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from seqstop.boundary_opt import (Ex1Boundary, Ex2Boundary, RankDeficientDesign, boundary_decisions,
                                  decide_ex1, decide_ex2, default_grid, evaluate_policy_value,
                                  ex1_bounds, fit_and_maximize, fit_quadratic, grid_search, local_nodes,
                                  optimise, stationary_point_se)
from seqstop.core import Action
from seqstop.example1 import Ex1Config, Ex1Summary, expected_terminal_utility, predictive_success
from seqstop.example2 import Ex2Summary
from seqstop.forward_sim import run_forward


def lattice_value(phi, cfg):
    """Exact expected utility of the funnel rule by recursion over (t, k)."""
    T = cfg.t_max
    v = {}
    for t in range(T, 0, -1):
        lo, hi = ex1_bounds(t, phi, T)
        for k in range(t + 1):
            p = k / t
            s1 = expected_terminal_utility(t, k, Action.STOP1, cfg)
            s2 = expected_terminal_utility(t, k, Action.STOP2, cfg)
            if p < lo:
                v[t, k] = s1
            elif p > hi:
                v[t, k] = s2
            elif t == T:
                v[t, k] = max(s1, s2)
            else:
                s = predictive_success(t, k, cfg)
                v[t, k] = s * v[t + 1, k + 1] + (1 - s) * v[t + 1, k]
    s = predictive_success(0, 0, cfg)
    return s * v[1, 1] + (1 - s) * v[1, 0]


def test_bounds_shape():
    lo, hi = ex1_bounds(np.array([1, 50]), 0.3, 50)
    np.testing.assert_allclose(lo, [0.0, 0.3])
    np.testing.assert_allclose(hi, [1.0, 0.3])


@pytest.mark.parametrize("phi", [0.2, 0.5, 0.7])
def test_monte_carlo_value_matches_lattice(phi):
    cfg = Ex1Config(t_max=20)
    ds = run_forward(cfg, 20000, master_seed=1)
    pv = evaluate_policy_value(ds, Ex1Boundary(phi), scoring="drawn")
    assert pv.mean == pytest.approx(lattice_value(phi, cfg), abs=3 * pv.se)


def test_posterior_scoring_has_same_mean_smaller_se():
    cfg = Ex1Config(t_max=20)
    ds = run_forward(cfg, 20000, master_seed=2)
    a = evaluate_policy_value(ds, Ex1Boundary(0.5), scoring="drawn")
    b = evaluate_policy_value(ds, Ex1Boundary(0.5), scoring="posterior")
    assert b.se < a.se
    assert b.mean == pytest.approx(lattice_value(0.5, cfg), abs=3 * b.se)


def _mirror(ds):
    """Same episodes with successes and failures swapped (and the hypotheses with them)."""
    y = 1.0 - ds.outcome
    k = np.cumsum(y, axis=1)
    summary = np.stack([k / ds.times, k], axis=-1)
    theta = np.stack([1.0 - ds.theta[:, 0], 3.0 - ds.theta[:, 1]], axis=1)
    return dataclasses.replace(ds, theta=theta, summary=summary, outcome=y)


def test_mirror_symmetry_of_funnel():
    cfg = Ex1Config(t_max=15)
    ds = run_forward(cfg, 3000, master_seed=3)
    mir = _mirror(ds)
    for phi in (0.2, 0.35, 0.6):
        for scoring in ("drawn", "posterior"):
            a = evaluate_policy_value(ds, Ex1Boundary(phi), scoring=scoring).utilities
            b = evaluate_policy_value(mir, Ex1Boundary(1 - phi), scoring=scoring).utilities
            np.testing.assert_allclose(a, b, atol=1e-9)


def test_decide_ex1_matches_matrix(ex1_ds_small):
    ds = ex1_ds_small
    d = boundary_decisions(ds, Ex1Boundary(0.4))
    for m in range(0, 200, 17):
        for t in range(1, ds.t_max):
            s = Ex1Summary(t, int(ds.summary[m, t - 1, 1]))
            assert decide_ex1(s, Ex1Boundary(0.4), ds.config) == d[m, t - 1]


def test_decide_ex1_forced_at_horizon():
    cfg = Ex1Config(t_max=10)
    assert decide_ex1(Ex1Summary(10, 7), Ex1Boundary(0.5), cfg) == Action.STOP2
    with pytest.raises(ValueError):
        decide_ex1(Ex1Summary(0, 0), Ex1Boundary(0.5), cfg)


def test_decide_ex2_wedge():
    b = Ex2Boundary(1.0, 1.0, 0.5)
    assert decide_ex2(Ex2Summary(-0.1, 0.5), b) == Action.STOP1
    assert decide_ex2(Ex2Summary(1.1, 0.5), b) == Action.STOP2
    assert decide_ex2(Ex2Summary(0.5, 0.5), b) == Action.CONTINUE


def test_boundary_validation():
    with pytest.raises(ValueError):
        Ex1Boundary(1.0)
    with pytest.raises(ValueError):
        Ex2Boundary(-1.0, 1.0, 0.5)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-2, 2), st.floats(0.2, 3), st.floats(0.2, 3), st.floats(-0.5, 0.5))
def test_fit_recovers_exact_quadratic(c0, c1, a11, a22, a12):
    a12 = a12 * np.sqrt(a11 * a22)
    quad = -np.array([[a11, a12], [a12, a22]])
    lin = np.array([c1, -c1 / 2])
    g = np.array([(x, y) for x in np.linspace(-2, 2, 5) for y in np.linspace(-2, 2, 5)])
    vals = c0 + g @ lin + np.einsum("ni,ij,nj->n", g, quad, g)
    surf = fit_quadratic(g, vals)
    np.testing.assert_allclose(surf.quad, quad, atol=1e-9)
    np.testing.assert_allclose(surf.stationary_point(), np.linalg.solve(-2 * quad, lin), atol=1e-8)


def test_rank_deficient_design():
    g = np.array([(x, 1.0) for x in np.linspace(0, 1, 10)])
    with pytest.raises(RankDeficientDesign, match="single value"):
        fit_quadratic(g, np.zeros(10))
    with pytest.raises(RankDeficientDesign):
        fit_quadratic(np.array([[0.0], [1.0]]), [0.0, 1.0])


def test_fallback_when_convex():
    x = np.linspace(0, 1, 9)
    fit = fit_and_maximize(x, (x - 0.5) ** 2)
    assert fit.fallback and fit.optimum[0] in (0.0, 1.0)


def test_fallback_when_outside_box():
    x = np.linspace(0, 1, 9)
    fit = fit_and_maximize(x, -(x - 2.0) ** 2)
    assert fit.fallback and fit.optimum[0] == 1.0


def test_stationary_point_se_matches_simulation():
    rng = np.random.default_rng(0)
    x = np.linspace(0, 1, 21)
    truth = -4 * (x - 0.45) ** 2
    opts, ses = [], []
    for _ in range(400):
        y = truth + 0.05 * rng.standard_normal(x.size)
        fit = fit_and_maximize(x, y)
        opts.append(fit.optimum[0])
        ses.append(stationary_point_se(x, y)[0])
    assert np.std(opts) == pytest.approx(np.mean(ses), rel=0.15)


def test_local_nodes_window():
    nodes = default_grid("example2", 5)
    vals = -np.sum((nodes - nodes[62]) ** 2, axis=1)
    keep = local_nodes(nodes, vals, 1)
    assert keep.sum() == 27 and keep[62]


def test_local_window_shifts_inwards_at_edges():
    nodes = default_grid("example2", 5)
    vals = -np.sum((nodes - nodes[0]) ** 2, axis=1)
    keep = local_nodes(nodes, vals, 1)
    assert keep.sum() == 27 and keep[0]
    assert all(len(np.unique(nodes[keep, i])) == 3 for i in range(3))


def test_default_grids():
    assert default_grid("example1").shape == (33, 1)
    assert default_grid("example2").shape == (1000, 3)


def test_grid_search_workers_agree(ex1_ds_small):
    a = grid_search(ex1_ds_small, workers=1)
    b = grid_search(ex1_ds_small, workers=3)
    np.testing.assert_array_equal(a.value, b.value)


def test_optimise_ex1_small(ex1_small):
    ds = run_forward(ex1_small, 4000, master_seed=5)
    gs, fit, opt, pv = optimise(ds)
    assert not fit.fallback
    assert 0.3 < opt.phi < 0.7
    assert pv.mean >= gs.value.max() - 3 * pv.se


def test_ex2_optimise_short(ex2_ds_short):
    gs, fit, opt, pv = optimise(ex2_ds_short, nodes=default_grid("example2", 5))
    assert len(gs.value) == 125
    assert np.isfinite(pv.mean)


def test_contract_examples():
    cfg = Ex1Config()
    assert decide_ex1(Ex1Summary(1, 0), Ex1Boundary(0.3), cfg) == Action.CONTINUE
    assert decide_ex1(Ex1Summary(1, 1), Ex1Boundary(0.3), cfg) == Action.CONTINUE
    assert decide_ex1(Ex1Summary(50, 45), Ex1Boundary(0.503), cfg) == Action.STOP2
    assert decide_ex2(Ex2Summary(0.9, 0.2), Ex2Boundary(1.572, 1.200, 0.515)) == Action.STOP2


def test_always_stop1_is_exact(ex2_ds_short):
    # c far below any delta95 mean: every episode takes Stop1 at t=1
    pv = evaluate_policy_value(ex2_ds_short, Ex2Boundary(0.0, 0.0, 1e6))
    assert pv.mean == -ex2_ds_short.config.cost_c1 and pv.se == 0.0 and np.all(pv.stop_t == 1)


def test_never_stopping_bounds_give_forced_average(ex2_ds_short):
    from seqstop.evaluation import terminal_utilities
    pv = evaluate_policy_value(ex2_ds_short, Ex2Boundary(1e9, 1e9, 0.0))
    tu = terminal_utilities(ex2_ds_short)[:, -1]
    assert pv.mean == pytest.approx(np.mean(tu.max(axis=1)))
    assert np.all(pv.stop_t == ex2_ds_short.t_max)


def test_single_node_grid(ex1_ds_small):
    gs = grid_search(ex1_ds_small, nodes=[[0.4]])
    assert gs.value[0] == evaluate_policy_value(ex1_ds_small, Ex1Boundary(0.4)).mean


def test_exact_quadratic_recovered_on_nine_nodes():
    x = np.linspace(0.1, 0.9, 9)
    fit = fit_and_maximize(x, -(x - 0.5) ** 2)
    assert not fit.fallback and abs(fit.optimum[0] - 0.5) < 1e-12


def test_saddle_falls_back():
    g = np.array([(x, y) for x in np.linspace(-1, 1, 5) for y in np.linspace(-1, 1, 5)])
    fit = fit_and_maximize(g, g[:, 0] ** 2 - g[:, 1] ** 2)
    assert fit.fallback and "negative definite" in fit.diagnostics["reason"]


def test_grid_argmax_near_reference_optimum():
    ds = run_forward(Ex1Config(), 1000, master_seed=0)
    gs = grid_search(ds)
    assert abs(gs.params[gs.best_index, 0] - 0.503) <= 0.05


def test_fitted_optimum_not_worse_than_grid(ex1_ds_small):
    gs, fit, opt, pv = optimise(ex1_ds_small)
    assert fit.fallback or pv.mean >= gs.value.max() - 2 * pv.se


def test_truncation_consistency_by_replay(ex2_ds_short):
    from seqstop.example2 import terminal_utility
    b = Ex2Boundary(0.5, 0.5, 0.4)
    ds = ex2_ds_short
    pv = evaluate_policy_value(ds, b)
    for m in range(0, ds.m, 23):
        for t in range(1, ds.t_max + 1):
            s = Ex2Summary(*ds.summary[m, t - 1])
            a = decide_ex2(s, b, t, ds.config)
            if a != Action.CONTINUE:
                break
        assert pv.stop_t[m] == t and pv.actions[m] == a
        assert pv.utilities[m] == pytest.approx(terminal_utility(s, a, t, ds.config))
