import os

import numpy as np
import pytest

from fbm_lab.autodiff import ContractViolation
from fbm_lab.data import (OfflineDataset, build_labelled_set, generate_dataset, sample_slices)
from fbm_lab.envgen import DynamicsConfig, GridWorld, OcclusionConfig, PointMass


@pytest.fixture(scope="module")
def small():
    return generate_dataset(PointMass(episode_length=30), "ou_explore", 4, seed=5,
                            occlusion=OcclusionConfig("noisy"))


def test_layout(small):
    assert small.n_transitions == 120
    assert small.states.shape == (124, 4)
    assert small.prev_actions.shape == (124, 2)
    # the first observation of every episode has no previous action
    np.testing.assert_array_equal(small.prev_actions[small.starts], 0.0)
    assert small.meta["occlusion"]["mode"] == "noisy"


def test_observations_are_noisy_states(small):
    diff = small.observations - small.states
    assert 0.15 < diff.std() < 0.25


def test_save_load_round_trip(small, tmp_path):
    path = os.path.join(tmp_path, "d.fbd")
    small.save(path)
    back = OfflineDataset.load(path)
    np.testing.assert_array_equal(back.states, small.states)
    np.testing.assert_array_equal(back.observations, small.observations)
    np.testing.assert_array_equal(back.prev_actions, small.prev_actions)
    assert back.meta == small.meta


def test_gather_pads_before_episode_start(small):
    traj = small.gather(np.array([1]), np.array([2]), 5)
    np.testing.assert_array_equal(traj.valid_mask[0], [False, False, True, True, True])
    np.testing.assert_array_equal(traj.observations[0, 2:], small.observations[small.starts[1]:small.starts[1] + 3])
    np.testing.assert_array_equal(traj.observations[0, :2], 0.0)


def test_sample_slices_alignment(small):
    rng = np.random.default_rng(0)
    b = sample_slices(small, 16, 3, 2, rng, include_states=True)
    idx = small.starts[b.episode] + b.t
    np.testing.assert_array_equal(b.tau_t.observations[:, -1], small.observations[idx])
    np.testing.assert_array_equal(b.tau_next.observations[:, -1], small.observations[idx + 1])
    np.testing.assert_array_equal(b.final_states, small.states[idx + 1])
    np.testing.assert_array_equal(b.actions, small.prev_actions[idx + 1])
    np.testing.assert_array_equal(b.states.tau_t.observations[:, -1], small.states[idx])
    assert np.all(b.t < small.lengths[b.episode])
    with pytest.raises(ContractViolation):
        sample_slices(small, 4, 0, 1, rng)


def test_labelled_set_rewards(small):
    env = PointMass()
    rng = np.random.default_rng(0)
    task = env.tasks[4]
    lab = build_labelled_set(small, task, 50, rng, L=3)
    np.testing.assert_array_equal(lab.rewards, task(lab.final_states))
    assert len(lab) == 50
    with pytest.raises(ContractViolation):
        build_labelled_set(small, task, 10_000, rng)
    with pytest.raises(ContractViolation):
        build_labelled_set(small, task, 0, rng)


def test_gridworld_dataset_has_one_hot_actions():
    ds = generate_dataset(GridWorld(episode_length=10), "uniform_random", 2, seed=0)
    assert ds.meta["action_kind"] == "discrete"
    np.testing.assert_array_equal(ds.prev_actions[1:11].sum(1), 1.0)
    np.testing.assert_array_equal(ds.states.sum(1), 1.0)


def test_dynamics_cycle_and_merge():
    env = PointMass(episode_length=5)
    dyn = [DynamicsConfig.scaled(0.5), DynamicsConfig.scaled(1.5)]
    ds = generate_dataset(env, "ou_explore", 4, seed=0, dynamics=dyn)
    assert ds.dynamics_tags == [(0.5, 0.5), (1.5, 1.5), (0.5, 0.5), (1.5, 1.5)]
    other = generate_dataset(env, "ou_explore", 1, seed=9)
    merged = OfflineDataset.merge([ds, other])
    assert len(merged.episodes) == 5
    assert merged.meta["dynamics"] == [[0.5, 0.5], [1.0, 1.0], [1.5, 1.5]]


def test_generation_is_deterministic():
    env = PointMass(episode_length=20)
    a = generate_dataset(env, "ou_explore", 2, seed=3, occlusion=OcclusionConfig("flickering"))
    b = generate_dataset(env, "ou_explore", 2, seed=3, occlusion=OcclusionConfig("flickering"))
    np.testing.assert_array_equal(a.observations, b.observations)
    with pytest.raises(ContractViolation):
        generate_dataset(env, "ou_explore", 0)
