"""Trajectory windows and the sequence encoders that summarise them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Parameter, Tensor
from .nn import Module, Preprocessor

KINDS = ("gru", "frame_stack", "last_obs")


@dataclass
class Trajectory:
    """A (batch of) length-L window(s) of (previous action, observation) pairs.

    Slot ``i`` holds the action that produced observation ``i`` together with
    that observation.  Padded slots precede the valid ones and are zero.
    """

    actions: np.ndarray  # (..., L, action_dim)
    observations: np.ndarray  # (..., L, obs_dim)
    valid_mask: np.ndarray  # (..., L)
    terminal_state_ref: np.ndarray | None = None

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        L = self.valid_mask.shape[-1]
        if self.actions.shape[-2] != L or self.observations.shape[-2] != L:
            raise ContractViolation("trajectory fields disagree on the window length")
        pad = ~self.valid_mask
        if np.any(self.actions[pad] != 0) or np.any(self.observations[pad] != 0):
            raise ContractViolation("padded trajectory slots must be exactly zero")
        # valid slots must form a suffix: once valid, always valid
        if np.any(self.valid_mask[..., :-1] & pad[..., 1:]):
            raise ContractViolation("valid trajectory slots must form a contiguous suffix")

    @property
    def length(self) -> int:
        return self.valid_mask.shape[-1]

    @property
    def batch_size(self) -> int:
        return self.valid_mask.shape[0] if self.valid_mask.ndim > 1 else 1

    @property
    def last_observation(self) -> np.ndarray:
        return self.observations[..., -1, :]

    def batched(self) -> "Trajectory":
        if self.valid_mask.ndim > 1:
            return self
        return Trajectory(self.actions[None], self.observations[None], self.valid_mask[None],
                          None if self.terminal_state_ref is None else self.terminal_state_ref[None])

    def __getitem__(self, idx) -> "Trajectory":
        ref = None if self.terminal_state_ref is None else self.terminal_state_ref[idx]
        return Trajectory(self.actions[idx], self.observations[idx], self.valid_mask[idx], ref)


def window(actions_prev, observations, t, L) -> Trajectory:
    """The window ending at index ``t`` of one episode, zero-padded at the start.

    ``actions_prev[i]`` is the action that led to ``observations[i]`` (zero
    for the first observation of the episode).
    """
    lo = t - L + 1
    n_pad = max(0, -lo)
    lo = max(lo, 0)
    acts = np.zeros((L, actions_prev.shape[-1]))
    obs = np.zeros((L, observations.shape[-1]))
    acts[n_pad:] = actions_prev[lo:t + 1]
    obs[n_pad:] = observations[lo:t + 1]
    mask = np.arange(L) >= n_pad
    return Trajectory(acts, obs, mask)


class GRUCell(Module):
    """Standard GRU cell; weights are split into input and recurrent blocks."""

    def __init__(self, rng, input_dim, hidden_dim, name):
        bound = 1.0 / np.sqrt(hidden_dim)
        H = hidden_dim
        self.hidden_dim = H
        self.Wx = Parameter(rng.uniform(-bound, bound, (input_dim, 3 * H)), f"{name}.Wx")
        self.b = Parameter(rng.uniform(-bound, bound, 3 * H), f"{name}.b")
        self.Wh_zr = Parameter(rng.uniform(-bound, bound, (H, 2 * H)), f"{name}.Wh_zr")
        self.Wh_n = Parameter(rng.uniform(-bound, bound, (H, H)), f"{name}.Wh_n")

    def project(self, x):
        return ad.linear(x, self.Wx, self.b)

    def step(self, h, xp):
        """One update from a projected input ``xp = x @ Wx + b``."""
        H = self.hidden_dim
        hzr = ad.matmul(h, self.Wh_zr)
        zg = ad.sigmoid(xp[:, :H] + hzr[:, :H])
        rg = ad.sigmoid(xp[:, H:2 * H] + hzr[:, H:])
        n = ad.tanh(xp[:, 2 * H:] + ad.matmul(rg * h, self.Wh_n))
        return (1.0 - zg) * n + zg * h

    def __call__(self, h, x):
        return self.step(h, self.project(x))


def gru_cell(cell: GRUCell, h, x):
    return cell(ad.as_tensor(h), ad.as_tensor(x))


class MemoryModel(Module):
    """Encoder ``f`` turning a trajectory window into a fixed-width vector."""

    def __init__(self, kind, obs_dim, action_dim, context_length, rng=None, name="mem",
                 embed_dim=64, hidden_dim=64, stack_k=4, norm="rms"):
        if kind not in KINDS:
            raise ContractViolation(f"unknown memory kind {kind!r}")
        self.kind = kind
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.context_length = int(context_length)
        self.stack_k = stack_k
        if kind == "frame_stack" and self.context_length < stack_k:
            raise ContractViolation("frame_stack needs context_length >= k")
        if kind == "gru":
            rng = rng if rng is not None else np.random.default_rng(0)
            self.embed = Preprocessor(rng, obs_dim + action_dim, embed_dim, f"{name}.embed", norm)
            self.cell = GRUCell(rng, embed_dim, hidden_dim, f"{name}.gru")
        self.hidden_dim = hidden_dim

    @property
    def output_dim(self) -> int:
        if self.kind == "gru":
            return self.hidden_dim
        if self.kind == "frame_stack":
            return self.stack_k * (self.obs_dim + self.action_dim)
        return self.obs_dim

    def initial_hidden(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.hidden_dim))

    def encode(self, actions, observations, valid=None) -> Tensor:
        """Encode a batch of windows given as ``(B, L, ·)`` arrays or tensors.

        ``valid`` is the ``(B, L)`` slot mask; the GRU skips padded slots so
        its state matches a stream started at the first valid slot.
        """
        actions, observations = ad.as_tensor(actions), ad.as_tensor(observations)
        B, L, O = observations.shape
        if L != self.context_length:
            raise ContractViolation(
                f"trajectory length {L} does not match context length {self.context_length}")
        if O != self.obs_dim or actions.shape[-1] != self.action_dim:
            raise ContractViolation(
                f"trajectory widths ({actions.shape[-1]}, {O}) do not match encoder "
                f"({self.action_dim}, {self.obs_dim})")
        if self.kind == "last_obs":
            return observations[:, L - 1, :]
        pairs = ad.concat([actions, observations], axis=-1)  # (B, L, A+O)
        if self.kind == "frame_stack":
            k = self.stack_k
            return ad.reshape(pairs[:, L - k:, :], (B, k * (O + self.action_dim)))
        emb = self.embed(ad.reshape(pairs, (B * L, O + self.action_dim)))
        xp = ad.reshape(self.cell.project(emb), (B, L, 3 * self.hidden_dim))
        h0 = np.zeros((B, self.hidden_dim))
        return ad.gru_scan(xp, h0, self.cell.Wh_zr, self.cell.Wh_n, valid)

    def encode_trajectory(self, traj: Trajectory) -> Tensor:
        traj = traj.batched()
        return self.encode(traj.actions, traj.observations, traj.valid_mask)

    def update(self, h_prev, action, observation) -> Tensor:
        """Single recurrent step used when streaming an episode."""
        if self.kind != "gru":
            raise ContractViolation(f"{self.kind} encoder has no recurrent hidden state")
        x = np.concatenate([np.atleast_2d(action), np.atleast_2d(observation)], axis=-1)
        return self.cell(ad.as_tensor(np.atleast_2d(h_prev)), self.embed(x))


def encode_trajectory(model: MemoryModel, traj: Trajectory) -> Tensor:
    return model.encode_trajectory(traj)


def rollout_hidden_update(model: MemoryModel, h_prev, action, observation) -> Tensor:
    return model.update(h_prev, action, observation)
