import numpy as np
import pytest
from hypothesis import given, strategies as st

from seqstop.core import (Action, ConfigError, SeedSpec, STREAM_AGENT, STREAM_EPISODE, UsageError,
                          legal_actions, legal_mask, rng_for)
from seqstop.example1 import Ex1Config, Ex1Env
from seqstop.example2 import Ex2Config, Ex2Env
from seqstop.forward_sim import run_forward


def test_first_step_forces_continue():
    assert legal_actions(0, 10) == (Action.CONTINUE,)


def test_horizon_masks_continue():
    assert legal_actions(10, 10) == (Action.STOP1, Action.STOP2)
    assert legal_actions(5, 10) == (Action.CONTINUE, Action.STOP1, Action.STOP2)


@given(st.integers(0, 60), st.integers(1, 60))
def test_mask_matches_legal_actions(t, t_max):
    t = min(t, t_max)
    mask = legal_mask(t, t_max)
    assert tuple(Action(i) for i in np.flatnonzero(mask)) == legal_actions(t, t_max)


def test_mask_is_vectorised():
    m = legal_mask(np.array([[0, 1], [4, 5]]), 5)
    assert m.shape == (2, 2, 3)
    assert not m[0, 0, 1] and not m[1, 1, 0] and m[1, 0].all()


def test_seed_streams_reproduce():
    a = SeedSpec(3, 7).generator().random(5)
    b = SeedSpec(3, 7).generator().random(5)
    np.testing.assert_array_equal(a, b)


def test_seed_streams_differ_by_stream_and_purpose():
    base = rng_for(3, 7).random(4)
    assert not np.allclose(base, rng_for(3, 8).random(4))
    assert not np.allclose(base, rng_for(4, 7).random(4))
    assert not np.allclose(rng_for(3, 7, STREAM_EPISODE).random(4), rng_for(3, 7, STREAM_AGENT).random(4))


def test_negative_seed_rejected():
    with pytest.raises(ConfigError):
        SeedSpec(-1, 0)


def test_step_after_terminal_raises():
    env = Ex1Env(Ex1Config(t_max=3))
    env.reset(SeedSpec(0, 0))
    env.step(Action.CONTINUE)
    env.step(Action.STOP1)
    with pytest.raises(UsageError):
        env.step(Action.CONTINUE)


def test_illegal_actions_raise():
    env = Ex1Env(Ex1Config(t_max=2))
    env.reset(SeedSpec(0, 0))
    with pytest.raises(UsageError):
        env.step(Action.STOP2)
    env.step(Action.CONTINUE)
    env.step(Action.CONTINUE)
    with pytest.raises(UsageError):
        env.step(Action.CONTINUE)


@pytest.mark.parametrize("seed", range(5))
def test_ex1_return_equals_utility(seed):
    cfg = Ex1Config(t_max=6)
    env = Ex1Env(cfg)
    theta, _ = env.reset(SeedSpec(seed, 0))
    total = 0.0
    for _ in range(4):
        total += env.step(Action.CONTINUE).reward
    tr = env.step(Action.STOP2)
    total += tr.reward
    expected = -cfg.cost_c * 4 - cfg.penalty_K * (theta != cfg.theta2)
    assert tr.terminal and total == pytest.approx(expected)


def test_stepping_matches_batch_simulation_ex1():
    cfg = Ex1Config(t_max=8)
    ds = run_forward(cfg, 20, master_seed=9)
    for m in range(20):
        env = Ex1Env(cfg)
        theta, _ = env.reset(SeedSpec(9, m))
        assert theta == ds.theta[m, 0]
        for t in range(cfg.t_max):
            env.step(Action.CONTINUE)
            assert env.k == ds.summary[m, t, 1]


def test_stepping_matches_batch_simulation_ex2():
    cfg = Ex2Config(t_max=5)
    ds = run_forward(cfg, 6, master_seed=2)
    for m in range(6):
        env = Ex2Env(cfg)
        env.reset(SeedSpec(2, m))
        for t in range(cfg.t_max):
            env.step(Action.CONTINUE)
            s = env.summary()
            assert s.delta95_mean == ds.summary[m, t, 0]
            assert s.delta95_sd == ds.summary[m, t, 1]


@pytest.mark.parametrize("seed", range(5))
def test_ex2_return_equals_utility(seed):
    from seqstop.example2 import terminal_utility
    cfg = Ex2Config(t_max=6)
    env = Ex2Env(cfg)
    env.reset(SeedSpec(seed, 0))
    total = sum(env.step(Action.CONTINUE).reward for _ in range(3))
    s = env.summary()
    total += env.step(Action.STOP2).reward
    assert total == pytest.approx(terminal_utility(s, Action.STOP2, 3, cfg))


def test_replay_gives_identical_transitions():
    def run():
        env = Ex2Env(Ex2Config(t_max=4))
        env.reset(SeedSpec(1, 3))
        return [env.step(a) for a in (0, 0, 0, 0, 1)]
    for x, y in zip(run(), run()):
        assert x.action == y.action and x.reward == y.reward
        np.testing.assert_array_equal(x.next_state, y.next_state)


def test_episode_terminates_by_horizon():
    env = Ex1Env(Ex1Config(t_max=3))
    env.reset(SeedSpec(0, 0))
    while True:
        legal = env.legal_actions()
        if env.step(legal[0]).terminal:
            break
    assert env.t == 3
