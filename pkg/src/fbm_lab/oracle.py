"""Exact computations on small finite MDPs and POMDPs.

Rewards are paid on arrival: the return is ``sum_t gamma^t R(s_{t+1})``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractViolation

MAX_STATES = 10_000


@dataclass
class FiniteMdp:
    P: np.ndarray  # (n_states, n_actions, n_states)
    gamma: float
    rewards: dict = field(default_factory=dict)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2]:
            raise ContractViolation(f"P must be (S, A, S), got {self.P.shape}")
        if self.P.shape[0] > MAX_STATES:
            raise ContractViolation(f"state space capped at {MAX_STATES}")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(-1) - 1.0)) > 1e-12:
            raise ContractViolation("each P[s, a, :] must be a distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation("gamma must lie in [0, 1)")

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def n_actions(self):
        return self.P.shape[1]


def two_state_cycle(gamma=0.5) -> FiniteMdp:
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    return FiniteMdp(P, gamma)


def random_mdp(n_states, n_actions, gamma, rng, concentration=1.0) -> FiniteMdp:
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    P /= P.sum(-1, keepdims=True)
    return FiniteMdp(P, gamma)


def policy_matrix(policy, n_states, n_actions) -> np.ndarray:
    """Normalise a policy given as an (S, A) array or an (S,) array of actions."""
    pi = np.asarray(policy)
    if pi.ndim == 1:
        out = np.zeros((n_states, n_actions))
        out[np.arange(n_states), pi.astype(int)] = 1.0
        return out
    if pi.shape != (n_states, n_actions) or np.max(np.abs(pi.sum(-1) - 1)) > 1e-9:
        raise ContractViolation("policy must be a row-stochastic (S, A) array")
    return pi.astype(np.float64)


def state_transition(mdp: FiniteMdp, policy) -> np.ndarray:
    pi = policy_matrix(policy, mdp.n_states, mdp.n_actions)
    return np.einsum("sa,sat->st", pi, mdp.P)


def exact_successor_measure(mdp: FiniteMdp, policy) -> np.ndarray:
    """``M[s, a, :] = P(.|s, a) (I - gamma P_pi)^-1``; rows sum to ``1/(1-gamma)``."""
    P_pi = state_transition(mdp, policy)
    n = mdp.n_states
    # LAPACK gesv: LU with partial pivoting
    resolvent = np.linalg.solve(np.eye(n) - mdp.gamma * P_pi, np.eye(n))
    return np.einsum("sat,tu->sau", mdp.P, resolvent)


def q_from_successor(M: np.ndarray, reward: np.ndarray) -> np.ndarray:
    return M @ np.asarray(reward, dtype=np.float64)


def policy_evaluation(mdp: FiniteMdp, policy, reward, tol=1e-12, max_iter=1_000_000):
    """Iterative evaluation of ``Q^pi``; independent of the linear solve above."""
    pi = policy_matrix(policy, mdp.n_states, mdp.n_actions)
    r = np.asarray(reward, dtype=np.float64)
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        V = (pi * Q).sum(-1)
        Q_new = mdp.P @ (r + mdp.gamma * V)
        if np.max(np.abs(Q_new - Q)) < tol:
            return Q_new
        Q = Q_new
    return Q


def value_iteration(mdp: FiniteMdp, task_id=None, tol=1e-10, reward=None, max_iter=1_000_000):
    """Bellman-optimality fixed point.  Returns ``(V, Q, greedy_actions)``."""
    if tol <= 0:
        raise ContractViolation("tol must be positive")
    r = np.asarray(mdp.rewards[task_id] if reward is None else reward, dtype=np.float64)
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = mdp.P @ (r + mdp.gamma * V)
        V_new = Q.max(-1)
        delta = np.max(np.abs(V_new - V))
        V = V_new
        if delta < tol:
            break
    Q = mdp.P @ (r + mdp.gamma * V)
    return V, Q, Q.argmax(-1)


def greedy_sets(Q: np.ndarray, atol=1e-9) -> np.ndarray:
    """Boolean (S, A) mask of actions within ``atol`` of the best value."""
    return Q >= Q.max(-1, keepdims=True) - atol


# ---------------------------------------------------------------- beliefs


@dataclass
class FinitePomdp:
    P: np.ndarray  # (S, A, S)
    O: np.ndarray  # (S, n_obs): probability of observing o on arrival in s'
    gamma: float
    reward: np.ndarray  # (S,)
    initial_belief: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.O = np.asarray(self.O, dtype=np.float64)
        if np.max(np.abs(self.O.sum(-1) - 1.0)) > 1e-12:
            raise ContractViolation("observation rows must be distributions")


@dataclass
class BeliefMdp:
    mdp: FiniteMdp
    beliefs: np.ndarray  # (n_beliefs, S)
    reward: np.ndarray  # expected arrival reward per belief state


def belief_expand(pomdp: FinitePomdp, cap=100, decimals=10) -> BeliefMdp:
    """Enumerate beliefs reachable from the initial belief.

    Beliefs are keyed after rounding to ``decimals``; more than ``cap``
    distinct beliefs raises ``ContractViolation``.
    """
    P, O = pomdp.P, pomdp.O
    n_s, n_a, _ = P.shape
    n_o = O.shape[1]

    def key(b):
        return tuple(np.round(b, decimals) + 0.0)

    start = np.asarray(pomdp.initial_belief, dtype=np.float64)
    beliefs = [start]
    index = {key(start): 0}
    edges = []  # (from, action, to, prob)
    frontier = [0]
    while frontier:
        i = frontier.pop(0)
        b = beliefs[i]
        for a in range(n_a):
            pred = b @ P[:, a, :]
            for o in range(n_o):
                joint = pred * O[:, o]
                p_o = joint.sum()
                if p_o <= 1e-15:
                    continue
                post = joint / p_o
                k = key(post)
                if k not in index:
                    if len(beliefs) >= cap:
                        raise ContractViolation(f"belief expansion exceeded cap of {cap}")
                    index[k] = len(beliefs)
                    beliefs.append(post)
                    frontier.append(index[k])
                edges.append((i, a, index[k], p_o))
    n_b = len(beliefs)
    T = np.zeros((n_b, n_a, n_b))
    for i, a, j, p in edges:
        T[i, a, j] += p
    B = np.array(beliefs)
    reward = B @ pomdp.reward
    mdp = FiniteMdp(T / T.sum(-1, keepdims=True), pomdp.gamma, {"reward": reward})
    return BeliefMdp(mdp, B, reward)
