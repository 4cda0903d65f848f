from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from seqstop.core import Action, ConfigError, UsageError
from seqstop.example1 import (Ex1Config, Ex1Summary, encode_state, exact_dp, expected_terminal_utility,
                              posterior_prob_theta1, predictive_success, utility)

from oracles import ex1_history_values

# frozen from the history-enumeration oracle (exact rational arithmetic)
EX1_T10_OPTIMUM = Fraction(-13083319, 390625)


def test_optimum_t10_matches_frozen_rational():
    sol = exact_dp(Ex1Config(t_max=10))
    assert sol.optimal_value == pytest.approx(float(EX1_T10_OPTIMUM), abs=1e-9)
    assert float(EX1_T10_OPTIMUM) == pytest.approx(-33.49329664, abs=1e-8)


def test_lattice_matches_history_enumeration():
    T = 8
    v, cont, stops = ex1_history_values(T=T)
    sol = exact_dp(Ex1Config(t_max=T))
    assert sol.optimal_value == pytest.approx(float(v), abs=1e-10)
    for t in range(1, T + 1):
        for k in range(t + 1):
            hist = (1,) * k + (0,) * (t - k)
            s1, s2 = stops(hist)
            assert sol.q[t, k, 1] == pytest.approx(float(s1), abs=1e-10)
            assert sol.q[t, k, 2] == pytest.approx(float(s2), abs=1e-10)
            if t < T:
                assert sol.q[t, k, 0] == pytest.approx(float(cont(hist)), abs=1e-10)


def test_continuation_depends_only_on_counts():
    _, cont, _ = ex1_history_values(T=6)
    assert cont((1, 0, 1)) == cont((0, 1, 1)) == cont((1, 1, 0))


def test_horizon_one_by_hand():
    # one outcome then a forced stop: the wrong-decision probability is 0.4 either way
    sol = exact_dp(Ex1Config(t_max=1))
    assert sol.optimal_value == pytest.approx(-41.0)


def test_continue_masked_at_horizon():
    sol = exact_dp(Ex1Config(t_max=5))
    assert np.all(np.isneginf(sol.q[5, :6, 0]))
    assert np.all(sol.policy[5, :6] != Action.CONTINUE)


def test_value_symmetry():
    # swapping successes and failures swaps the hypotheses when theta1 + theta2 = 1
    sol = exact_dp(Ex1Config(t_max=12))
    for t in range(1, 12):
        for k in range(t + 1):
            assert sol.q[t, k, 0] == pytest.approx(sol.q[t, t - k, 0], abs=1e-9)
            assert sol.q[t, k, 1] == pytest.approx(sol.q[t, t - k, 2], abs=1e-9)


@given(st.integers(0, 40), st.data())
def test_posterior_matches_bayes_rule(t, data):
    k = data.draw(st.integers(0, t))
    cfg = Ex1Config()
    l1 = Fraction(2, 5) ** k * Fraction(3, 5) ** (t - k)
    l2 = Fraction(3, 5) ** k * Fraction(2, 5) ** (t - k)
    assert posterior_prob_theta1(t, k, cfg) == pytest.approx(float(l1 / (l1 + l2)), rel=1e-12)


@given(st.integers(1, 40), st.data())
def test_predictive_in_theta_range(t, data):
    k = data.draw(st.integers(0, t))
    p = predictive_success(t, k, Ex1Config())
    assert 0.4 <= p <= 0.6


def test_expected_terminal_utility_rejects_continue():
    with pytest.raises(UsageError):
        expected_terminal_utility(3, 1, Action.CONTINUE, Ex1Config())


def test_utility_values():
    cfg = Ex1Config()
    assert utility(7, Action.STOP1, 0.4, cfg) == -7.0
    assert utility(7, Action.STOP2, 0.4, cfg) == -107.0


def test_encode_state_prior_fraction():
    x = encode_state(np.array([0, 5]), np.array([0, 2]), 10)
    np.testing.assert_allclose(x, [[0.0, 0.5], [0.5, 0.4]])


def test_summary_validation():
    assert Ex1Summary(4, 1).p == 0.25
    with pytest.raises(ValueError):
        Ex1Summary(2, 3)


@pytest.mark.parametrize("kwargs", [dict(theta1=0.6, theta2=0.4), dict(cost_c=0), dict(t_max=0)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        Ex1Config(**kwargs)


def test_large_lattice_guard():
    with pytest.raises(MemoryError):
        exact_dp(Ex1Config(t_max=200))


@given(st.integers(1, 50))
def test_posterior_decreasing_in_k(t):
    p = posterior_prob_theta1(t, np.arange(t + 1), Ex1Config())
    assert np.all(np.diff(p) < 0)


@given(st.integers(1, 50))
def test_stop_utilities_cross_once(t):
    cfg = Ex1Config()
    k = np.arange(t + 1)
    d = expected_terminal_utility(t, k, Action.STOP1, cfg) - expected_terminal_utility(t, k, Action.STOP2, cfg)
    assert np.all(np.diff(d) < 0)
    assert np.sum(np.diff(np.sign(d)) != 0) <= 2   # one crossing, possibly through an exact tie


def test_bellman_residual_is_zero():
    cfg = Ex1Config()
    sol = exact_dp(cfg)
    v = np.max(sol.q, axis=-1)
    for t in range(cfg.t_max):
        k = np.arange(t + 1)
        s = predictive_success(t, k, cfg)
        # q carries the sunk cost -c t, so the -c of one more step is already inside v[t+1]
        expected = s * v[t + 1, k + 1] + (1 - s) * v[t + 1, k]
        np.testing.assert_allclose(sol.q[t, k, 0], expected, atol=1e-12, rtol=0)


def test_exact_beats_every_funnel_policy():
    from test_boundary_opt import lattice_value
    cfg = Ex1Config(t_max=20)
    best = exact_dp(cfg).optimal_value
    for phi in np.linspace(0.02, 0.98, 25):
        assert lattice_value(phi, cfg) <= best + 1e-9


def test_optimum_t50_value():
    assert exact_dp(Ex1Config()).optimal_value == pytest.approx(-29.963, abs=1e-3)
