from fractions import Fraction

import numpy as np
import pytest
from helpers import binomial_central_interval

from fbm_lab.autodiff import ContractViolation
from fbm_lab.envgen import (DynamicsConfig, GridWorld, OcclusionConfig, PointMass, make_dynamics_split,
                            make_env, observe, observe_batch)


def test_gridworld_transitions_are_exact_distributions():
    env = GridWorld()
    for row in env.exact_transitions():
        for probs in row:
            assert sum(probs.values()) == Fraction(1)
    P = env.transition_matrix()
    assert P.shape == (49, 4, 49)
    np.testing.assert_allclose(P.sum(-1), 1.0, atol=1e-15)
    # corner bump: moving up from the top-left keeps the agent mostly in place
    assert P[0, 0, 0] == pytest.approx(0.9 + 0.1 / 3)


def test_gridworld_step_matches_transition_matrix():
    env = GridWorld()
    rng = np.random.default_rng(0)
    s = env.one_hot(np.full(20000, 24))
    nxt, _, _ = env.step(s, np.zeros(20000, dtype=int), rng=rng)
    freq = np.bincount(env.state_index(nxt), minlength=49) / 20000
    np.testing.assert_allclose(freq, env.transition_matrix()[24, 0], atol=0.01)


def test_gridworld_rejects_bad_actions():
    env = GridWorld()
    s = env.reset(0)
    with pytest.raises(ContractViolation):
        env.step(s, 4)
    with pytest.raises(ContractViolation):
        env.step(s, 0.5)
    with pytest.raises(ContractViolation):
        env.spec(OcclusionConfig("hidden_velocity"))


def test_gridworld_goal_rewards():
    env = GridWorld()
    r = env.reward_vector(env.tasks[0])
    assert r.sum() == 1 and r[0] == 1
    assert [t.task_id for t in env.tasks] == ["goal_tl", "goal_tr", "goal_bl", "goal_br"]


def test_pointmass_step_and_walls():
    env = PointMass()
    s = np.array([0.99, 0.0, 1.0, 0.0])
    nxt, rewards, done = env.step(s, np.array([1.0, 0.0]))
    assert nxt[0] <= 1.0 and nxt[2] < 0  # reflected
    assert set(rewards) == {t.task_id for t in env.tasks}
    assert not done
    _, _, done = env.step(s, np.zeros(2), t=env.episode_length - 1)
    assert done
    with pytest.raises(ContractViolation):
        env.step(s, np.array([1.5, 0.0]))
    with pytest.raises(ContractViolation):
        env.step(s, np.array([1.0]))


def test_pointmass_heavier_mass_accelerates_less():
    env = PointMass()
    s = np.zeros(4)
    light, _, _ = env.step(s, np.ones(2), dynamics=DynamicsConfig.scaled(0.5))
    heavy, _, _ = env.step(s, np.ones(2), dynamics=DynamicsConfig.scaled(2.0))
    assert light[2] > heavy[2] > 0


def test_pointmass_tasks():
    env = PointMass()
    ids = {t.task_id: t for t in env.tasks}
    goal = ids["reach_tr"]
    assert goal(np.array([0.75, 0.75, 0, 0])) == 1.0
    assert goal(np.array([0.0, 0.0, 0, 0])) == 0.0
    run = ids["run_px"]
    assert run(np.array([0, 0, 0.5, 0])) == 0.5
    assert run(np.array([0, 0, 3.0, 0])) == 1.0
    assert run(np.array([0, 0, -1.0, 0])) == 0.0


def test_noise_variance_matches_sigma():
    rng = np.random.default_rng(0)
    states = np.zeros((50000, 4))
    obs, _ = observe_batch(states, OcclusionConfig("noisy", sigma_noise=0.2), rng)
    assert abs(obs.var() - 0.04) / 0.04 < 0.05


def test_flicker_rate_inside_exact_binomial_interval():
    rng = np.random.default_rng(1)
    n = 20000
    obs, dropped = observe_batch(np.ones((n, 4)), OcclusionConfig("flickering", p_flick=0.2), rng)
    lo, hi = binomial_central_interval(n, 0.2)
    assert lo <= dropped.sum() <= hi
    assert np.all(obs[dropped] == 0) and np.all(obs[~dropped] == 1)


def test_binomial_interval_helper():
    lo, hi = binomial_central_interval(100, 0.5)
    assert (lo, hi) == (37, 63)


def test_hidden_velocity_drops_velocity():
    obs = observe(np.array([0.1, 0.2, 0.3, 0.4]), OcclusionConfig("hidden_velocity"), 0)
    np.testing.assert_array_equal(obs.values, [0.1, 0.2])
    assert PointMass().spec(OcclusionConfig("hidden_velocity")).obs_dim == 2


def test_occlusion_config_validation():
    with pytest.raises(ContractViolation):
        OcclusionConfig("foggy")
    with pytest.raises(ContractViolation):
        OcclusionConfig("noisy", sigma_noise=-1)
    with pytest.raises(ContractViolation):
        OcclusionConfig("flickering", p_flick=1.5)
    with pytest.raises(ContractViolation):
        DynamicsConfig(0.0, 1.0)
    with pytest.raises(ContractViolation):
        make_env("cartpole")


def test_dynamics_split_kinds():
    assert make_dynamics_split([0.5, 1.5], [1.0]).kind == "interpolation"
    assert make_dynamics_split([0.5, 1.5], [2.0]).kind == "extrapolation"
    assert make_dynamics_split([0.5, 1.5], [1.0, 2.0]).kind == "mixed"
    assert make_dynamics_split([1.0], [1.0]).kind == "degenerate"
    with pytest.raises(ContractViolation):
        make_dynamics_split([], [1.0])


def test_reset_is_seeded():
    env = PointMass()
    np.testing.assert_array_equal(env.reset(3, batch=5), env.reset(3, batch=5))
    assert np.all(np.abs(env.reset(3, batch=100)[:, :2]) <= 0.8)
