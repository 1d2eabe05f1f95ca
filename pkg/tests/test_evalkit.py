import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fbm_lab import autodiff as ad
from fbm_lab.autodiff import ContractViolation
from fbm_lab.bfm import ModelConfig, build_variant, fit_tabular_fb_family, sample_sphere
from fbm_lab.data import generate_dataset
from fbm_lab.envgen import GridWorld, OcclusionConfig, PointMass
from fbm_lab.evalkit import (aggregate_score, bootstrap_aggregate_ci, bootstrap_ci, evaluate_checkpoint,
                             family_oracle_check, gridworld_mdp, gridworld_rewards, iqm,
                             labelled_sets, oracle_check, rollout, select_checkpoint,
                             state_distribution)

SMALL = ModelConfig(d=8, f_dims=(16,), b_dims=(16,), pi_dims=(16,), pre_dim=8, embed_dim=8,
                    hidden_dim=8, context_length_forward=4, context_length_backward=4)
finite = st.floats(-1e6, 1e6, allow_nan=False)


def test_iqm_reference_values():
    assert iqm(range(1, 21)) == 10.5
    assert iqm([3.0] * 7) == 3.0
    assert iqm([1, 2, 3]) == 2.0  # fewer than 4 values: plain mean
    with pytest.raises(ContractViolation):
        iqm([])


@given(st.lists(finite, min_size=1, max_size=60), st.randoms())
@settings(max_examples=200, deadline=None)
def test_iqm_permutation_invariant_and_bounded(xs, rnd):
    ys = list(xs)
    rnd.shuffle(ys)
    assert iqm(ys) == pytest.approx(iqm(xs), rel=1e-12, abs=1e-9)
    assert min(xs) - 1e-9 <= iqm(xs) <= max(xs) + 1e-9


@given(st.lists(finite, min_size=1, max_size=3))
def test_iqm_small_lists_fall_back_to_mean(xs):
    assert iqm(xs) == pytest.approx(np.mean(xs), rel=1e-12, abs=1e-9)


@given(st.floats(-1e3, 1e3), st.integers(1, 40))
def test_iqm_of_constant(c, n):
    assert iqm([c] * n) == pytest.approx(c)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=30))
@settings(max_examples=50, deadline=None)
def test_bootstrap_brackets_point(xs):
    lo, hi = bootstrap_ci(xs, resamples=200)
    assert lo <= iqm(xs) <= hi


def test_aggregate_and_cell_bootstrap():
    rng = np.random.default_rng(0)
    cells = [rng.normal(i, 1, size=10) for i in range(8)]
    point = aggregate_score(cells)
    assert point == iqm([iqm(c) for c in cells])
    lo, hi = bootstrap_aggregate_ci(cells, 300)
    assert lo <= point <= hi and hi - lo < 2
    lo2, hi2 = bootstrap_aggregate_ci(cells, 300)
    assert (lo, hi) == (lo2, hi2)


def test_select_checkpoint():
    assert select_checkpoint({2000: [1.0, 3.0], 4000: [2.5, 2.5], 6000: [0.0, 1.0]}) == 4000
    assert select_checkpoint({4000: [1.0], 2000: [1.0]}) == 2000  # ties go to the earlier step
    with pytest.raises(ContractViolation):
        select_checkpoint({})


@pytest.fixture(scope="module")
def pm_setup():
    env = PointMass(episode_length=40)
    occ = OcclusionConfig("flickering")
    ds = generate_dataset(env, "ou_explore", 3, seed=0, occlusion=occ)
    model = build_variant("fb_m", "all", env=env, occlusion=occ, cfg=SMALL, seed=0)
    return env, occ, ds, model


def test_rollout_is_deterministic(pm_setup):
    env, occ, ds, model = pm_setup
    z = sample_sphere(np.random.default_rng(0), 4, model.d)
    tasks = [env.tasks[0], env.tasks[4], env.tasks[5], env.tasks[6]]
    a = rollout(model, env, z, tasks, seed=11, occlusion=occ)
    b = rollout(model, env, z, tasks, seed=11, occlusion=occ)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (4,)
    with pytest.raises(ContractViolation):
        rollout(model, env, z, tasks[:2], seed=0)


def test_goal_returns_stop_at_first_success():
    env = PointMass(episode_length=30)
    model = build_variant("fb", "none", env=env, cfg=SMALL)
    z = sample_sphere(np.random.default_rng(1), 1, model.d)
    task = env.tasks[0]
    big = type(task)(task.task_id, "goal", lambda s: np.ones(s.shape[:-1]), terminates=True)
    assert rollout(model, env, z, [big], seed=0)[0] == 1.0


def test_evaluate_checkpoint(pm_setup):
    env, occ, ds, model = pm_setup
    lab = labelled_sets(ds, env.tasks, 50, seed=0, L=model.L_backward)
    rows = evaluate_checkpoint(model, env, env.tasks, lab, rollouts=3, seed=1, occlusion=occ)
    assert [r.task for r in rows] == [t.task_id for t in env.tasks]
    assert all(len(r.returns) == 3 for r in rows)
    with pytest.raises(ContractViolation):
        evaluate_checkpoint(model, env, env.tasks, {}, rollouts=1)


def test_state_distribution_and_neural_oracle_check():
    env = GridWorld(episode_length=30)
    ds = generate_dataset(env, "uniform_random", 5, seed=0)
    rho = state_distribution(ds, 49)
    assert rho.sum() == pytest.approx(1.0) and rho.shape == (49,)
    model = build_variant("fb", "all", env=env, cfg=SMALL)
    report = oracle_check(model, env, rho, gridworld_rewards(env, 2, seed=0))
    assert set(report) == {"goal_tl", "goal_tr", "goal_bl", "goal_br", "lin0", "lin1"}
    assert all(0.0 <= v["agreement"] <= 1.0 for v in report.values())


def test_family_oracle_check_small_grid():
    env = GridWorld(size=3)
    mdp = gridworld_mdp(env)
    rho = np.full(9, 1 / 9)
    rewards = gridworld_rewards(env, 2, seed=1)
    fam = fit_tabular_fb_family(mdp.P, env.gamma, list(rewards.values()), rho, steps=600)
    report = family_oracle_check(fam, env, rho, rewards)
    assert all(v["agreement"] == 1.0 for v in report.values())
