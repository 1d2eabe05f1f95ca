"""Evaluation protocol: rollouts, IQM, bootstrap CIs, checkpoint selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation
from .bfm import infer_task
from .data import OfflineDataset, build_labelled_set
from .envgen import DynamicsConfig, OcclusionConfig, observe_batch
from .oracle import FiniteMdp, exact_successor_measure, greedy_sets, value_iteration


def iqm(scores) -> float:
    """Interquartile mean: drop ``floor(n/4)`` values from each end of the sorted list."""
    x = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    n = len(x)
    if n == 0:
        raise ContractViolation("IQM of an empty list")
    k = n // 4
    return float(x[k:n - k].mean())


def bootstrap_ci(scores, resamples=1000, level=0.95, rng=None, statistic=iqm):
    """Percentile bootstrap interval of ``statistic``; always brackets the point value."""
    x = np.asarray(scores, dtype=np.float64).ravel()
    if len(x) == 0:
        raise ContractViolation("bootstrap of an empty list")
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, len(x), size=(resamples, len(x)))
    stats = np.array([statistic(x[row]) for row in idx])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    point = statistic(x)
    return float(min(lo, point)), float(max(hi, point))


def aggregate_score(cells) -> float:
    """All-task IQM over per-(task, seed) scores, each the IQM of its rollouts."""
    return iqm([iqm(c) for c in cells])


def bootstrap_aggregate_ci(cells, resamples=1000, level=0.95, rng=None):
    """Resample rollouts within each (task, seed) cell, then aggregate."""
    rng = np.random.default_rng(0) if rng is None else rng
    cells = [np.asarray(c, dtype=np.float64) for c in cells]
    if not cells:
        raise ContractViolation("no cells to bootstrap")
    stats = np.empty(resamples)
    for b in range(resamples):
        stats[b] = iqm([iqm(c[rng.integers(0, len(c), size=len(c))]) for c in cells])
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    point = aggregate_score(cells)
    return float(min(lo, point)), float(max(hi, point))


# ---------------------------------------------------------------- rollouts


class _ContextTracker:
    """Keeps the forward/policy context of many parallel episodes up to date."""

    def __init__(self, encoder, n):
        self.encoder = encoder
        self.kind = encoder.kind
        self.n = n
        if self.kind == "gru":
            self.h = np.zeros((n, encoder.hidden_dim))
        elif self.kind == "frame_stack":
            k = encoder.stack_k
            self.acts = np.zeros((n, k, encoder.action_dim))
            self.obs = np.zeros((n, k, encoder.obs_dim))

    def push(self, prev_action, obs):
        if self.kind == "gru":
            with ad.no_tape():
                self.h = self.encoder.update(self.h, prev_action, obs).data
        elif self.kind == "frame_stack":
            self.acts = np.concatenate([self.acts[:, 1:], prev_action[:, None]], axis=1)
            self.obs = np.concatenate([self.obs[:, 1:], obs[:, None]], axis=1)
        else:
            self.last = obs

    def hidden(self):
        if self.kind == "gru":
            return self.h
        if self.kind == "frame_stack":
            with ad.no_tape():
                return self.encoder.encode(self.acts, self.obs).data
        return self.last


def rollout(model, env, z, tasks, seed, occlusion: OcclusionConfig | None = None,
            dynamics: DynamicsConfig | None = None, episode_length=None):
    """Deterministic-policy rollouts, one per row of ``z``.

    ``tasks[i]`` scores row ``i``.  Returns undiscounted returns, shape (n,).
    Recurrent contexts stream over the whole episode.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    n = len(z)
    if len(tasks) != n:
        raise ContractViolation("need one task per rollout")
    occlusion = occlusion or OcclusionConfig()
    T = episode_length or env.episode_length
    rng = np.random.default_rng(seed)
    state = env.reset(rng, batch=n)
    consumer = model.F if model.discrete else model.pi
    tracker = _ContextTracker(consumer.encoder, n)
    prev_action = np.zeros((n, model.action_dim))
    returns = np.zeros(n)
    done = np.zeros(n, dtype=bool)
    terminates = np.array([task.terminates for task in tasks])
    for t in range(T):
        obs, _ = observe_batch(state, occlusion, rng, env)
        inp = obs if model.fwd_observed else state
        tracker.push(prev_action, inp)
        h = tracker.hidden()
        if model.discrete:
            a_idx = model.act_from_hidden(None, inp, z, h_F=h)
            action = a_idx
            prev_action = np.eye(model.action_dim)[a_idx]
        else:
            action = model.act_from_hidden(h, inp, z)
            prev_action = action
        state, _, _ = env.step(state, action, rng=rng, dynamics=dynamics, t=t)
        r = _task_rewards(tasks, state)
        returns += np.where(done, 0.0, r)
        done |= terminates & (r > 0)
        if done.all():
            break
    return returns


def _task_rewards(tasks, states):
    out = np.empty(len(tasks))
    by_id = {}
    for i, task in enumerate(tasks):
        by_id.setdefault(id(task), (task, []))[1].append(i)
    for task, rows in by_id.values():
        out[rows] = task(states[rows])
    return out


@dataclass
class TaskScore:
    task: str
    returns: np.ndarray
    z: np.ndarray

    @property
    def score(self) -> float:
        return iqm(self.returns)


def evaluate_checkpoint(model, env, tasks, labelled, rollouts=10, seed=0,
                        occlusion=None, dynamics=None) -> list[TaskScore]:
    """Infer z per task from its labelled set, then roll out the policy."""
    zs, row_tasks = [], []
    inferred = {}
    for task in tasks:
        if task.task_id not in labelled:
            raise ContractViolation(f"missing labelled set for task {task.task_id!r}")
        z = infer_task(model, labelled[task.task_id]).z
        inferred[task.task_id] = z
        zs += [z] * rollouts
        row_tasks += [task] * rollouts
    returns = rollout(model, env, np.array(zs), row_tasks, seed, occlusion, dynamics)
    out = []
    for i, task in enumerate(tasks):
        out.append(TaskScore(task.task_id, returns[i * rollouts:(i + 1) * rollouts],
                             inferred[task.task_id]))
    return out


def labelled_sets(dataset: OfflineDataset, tasks, k, seed, L=1, include_states=False):
    rng = np.random.default_rng(seed)
    k = min(k, len(dataset.observations))
    return {t.task_id: build_labelled_set(dataset, t, k, rng, L, include_states) for t in tasks}


def select_checkpoint(scores_by_step: dict) -> int:
    """Step whose seed-averaged all-task IQM is largest.

    ``scores_by_step[step]`` is a list (over seeds) of all-task IQMs.
    """
    if not scores_by_step:
        raise ContractViolation("no checkpoints to select from")
    return max(sorted(scores_by_step), key=lambda s: float(np.mean(scores_by_step[s])))


# ---------------------------------------------------------------- oracle checks


def gridworld_mdp(env) -> FiniteMdp:
    """The gridworld as an exact finite MDP carrying its goal rewards."""
    return FiniteMdp(env.transition_matrix(), env.gamma,
                     {t.task_id: env.reward_vector(t) for t in env.tasks})


def fb_tables(model, env, z):
    """``F[s, a]`` and ``B[s]`` over every one-hot gridworld state for one ``z``."""
    if not model.discrete:
        raise ContractViolation("oracle checks need a discrete-action model")
    if model.L_forward != 1 or model.L_backward != 1:
        raise ContractViolation("oracle checks need memory-free encoders")
    S = env.n_states
    states = np.eye(S)
    zs = np.repeat(np.atleast_2d(z), S, axis=0)
    with ad.no_tape():
        F = model.F.head(states, states, None, zs).data  # (S, A, d)
        B = model.B.head(states).data
    return F, B


def state_distribution(dataset: OfflineDataset, n_states) -> np.ndarray:
    """Empirical rho over one-hot states (the futures the FB loss samples)."""
    idx = np.argmax(dataset.states, axis=-1)
    mask = np.ones(len(idx), bool)
    mask[dataset.starts] = False  # futures are s_{t+1}; initial states never appear
    counts = np.bincount(idx[mask], minlength=n_states).astype(np.float64)
    return counts / counts.sum()


def oracle_check(model, env, rho, rewards: dict, atol=1e-8) -> dict:
    """Compare a trained gridworld FB model against exact oracles.

    For each named reward vector: infer ``z = sum_s rho(s) r(s) B(s)``, act
    greedily on ``F(s, a, z)^T z``, and report (i) the fraction of states
    whose greedy action lies in value iteration's optimal set and (ii) the
    mean absolute error of ``F^T B rho`` against the exact successor measure
    of that greedy policy.
    """
    mdp = gridworld_mdp(env)
    S = env.n_states
    with ad.no_tape():
        B_all = model.B.head(np.eye(S)).data
    out = {}
    for name, r in rewards.items():
        r = np.asarray(r, dtype=np.float64)
        z = (rho * r) @ B_all
        if model.cfg.normalize_inferred_z and np.linalg.norm(z) > 0:
            z = z * np.sqrt(model.d) / np.linalg.norm(z)
        F, B = fb_tables(model, env, z)
        Q_hat = F @ z
        greedy = Q_hat.argmax(-1)
        _, Q_star, _ = value_iteration(mdp, reward=r)
        optimal = greedy_sets(Q_star, atol * max(1.0, np.abs(Q_star).max()))
        agree = float(optimal[np.arange(S), greedy].mean())
        M = exact_successor_measure(mdp, greedy)
        M_hat = np.einsum("sad,td->sat", F, B) * rho[None, None, :]
        out[name] = {"agreement": agree, "mae": float(np.abs(M_hat - M).mean()),
                     "z": z, "greedy": greedy}
    return out


def gridworld_rewards(env, n_linear=5, seed=0) -> dict:
    """The goal rewards plus ``n_linear`` random rewards linear in the state features.

    With one-hot states and ``d >= S`` every reward is linear in B, so the
    linear rewards are drawn as Gaussian vectors over states.
    """
    out = {t.task_id: env.reward_vector(t) for t in env.tasks}
    rng = np.random.default_rng(seed)
    for i in range(n_linear):
        out[f"lin{i}"] = rng.normal(size=env.n_states)
    return out


def family_oracle_check(fam, env, rho, rewards: dict, atol=1e-8) -> dict:
    """:func:`oracle_check` for a :class:`TabularFBFamily` fitted on ``rewards`` (same order)."""
    mdp = gridworld_mdp(env)
    S = env.n_states
    out = {}
    for k, (name, r) in enumerate(rewards.items()):
        r = np.asarray(r, dtype=np.float64)
        greedy = fam.q_table(k, fam.infer(r, rho)).argmax(-1)
        _, Q_star, _ = value_iteration(mdp, reward=r)
        optimal = greedy_sets(Q_star, atol * max(1.0, np.abs(Q_star).max()))
        M = exact_successor_measure(mdp, greedy)
        out[name] = {"agreement": float(optimal[np.arange(S), greedy].mean()),
                     "mae": float(np.abs(fam.successor_estimate(k, rho) - M).mean()),
                     "greedy": greedy}
    return out
