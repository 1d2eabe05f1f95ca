"""Forward-backward models with optional memory, and memory-based USFs.

A model owns three consumers (forward map / successor features, backward
map / features, policy).  Each consumer reads trajectory windows through its
own encoder.  ``routing`` decides which consumers see observations and which
see privileged Markov states; a consumer fed Markov states is memory-free.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .memory import MemoryModel, Trajectory
from .nn import MLP, Module, Preprocessor, copy_params

VARIANTS = ("fb", "fb_m", "fb_stack", "usf_m", "usf")


@dataclass
class ModelConfig:
    variant: str = "fb"
    routing: str = "all"
    d: int = 16
    gamma: float = 0.98
    f_dims: tuple = (128, 128)
    b_dims: tuple = (64, 64)
    pi_dims: tuple = (128, 128)
    pre_dim: int = 64
    embed_dim: int = 64
    hidden_dim: int = 64
    context_length_forward: int = 8
    context_length_backward: int = 8
    stack_k: int = 4
    lambda_orth: float = 1.0
    norm: str = "rms"
    normalize_inferred_z: bool = False

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(d=50, f_dims=(1024, 1024), b_dims=(512, 512), pi_dims=(1024, 1024),
                    pre_dim=512, embed_dim=512, hidden_dim=512,
                    context_length_forward=32, context_length_backward=32)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k in ("f_dims", "b_dims", "pi_dims"):
            out[k] = list(out[k])
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("f_dims", "b_dims", "pi_dims"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class LatentTask:
    z: np.ndarray
    source: str  # prior_uniform | prior_backward | inferred


def sees_observations(routing: str, consumer: str) -> bool:
    """Whether ``consumer`` ('forward' covers F and pi, 'backward' covers B) reads observations."""
    if routing == "all":
        return True
    if routing == "none":
        return False
    if routing == "backward_only":
        return consumer == "backward"
    if routing == "forward_policy_only":
        return consumer == "forward"
    raise ContractViolation(f"unknown routing {routing!r}")


def _encoder_plan(variant, cfg: ModelConfig, observed: bool):
    """(kind, context length) of the encoder used by one consumer side."""
    if not observed or variant == "fb":
        return "last_obs", 1
    if variant == "fb_stack":
        return "frame_stack", cfg.stack_k
    return "gru", None


class _Consumer(Module):
    """An encoder plus the head that reads its output."""

    def encode(self, traj: Trajectory) -> Tensor:
        return self.encoder.encode(traj.actions, traj.observations, traj.valid_mask)


class ForwardNet(_Consumer):
    """``F(h, o, a, z)``; for discrete actions one d-vector per action."""

    def __init__(self, rng, encoder: MemoryModel, in_dim, action_dim, d, dims, pre_dim,
                 n_actions=None, name="F", norm="rms"):
        self.encoder = encoder
        self.discrete = n_actions is not None
        self.n_actions = n_actions
        self.d = d
        h_in = encoder.output_dim + (0 if self.discrete else action_dim)
        self.pre_ha = Preprocessor(rng, h_in, pre_dim, f"{name}.pre_ha", norm)
        self.pre_oz = Preprocessor(rng, in_dim + d, pre_dim, f"{name}.pre_oz", norm)
        out = d * (n_actions if self.discrete else 1)
        self.mlp = MLP(rng, 2 * pre_dim, dims, out, f"{name}.mlp", norm)

    def head(self, h, last_obs, action, z) -> Tensor:
        h, z = ad.as_tensor(h), ad.as_tensor(z)
        x1 = h if self.discrete else ad.concat([h, ad.as_tensor(action)], axis=-1)
        x = ad.concat([self.pre_ha(x1), self.pre_oz(ad.concat([ad.as_tensor(last_obs), z], -1))], -1)
        out = self.mlp(x)
        if self.discrete:
            return ad.reshape(out, (out.shape[0], self.n_actions, self.d))
        return out

    def __call__(self, traj: Trajectory, action, z) -> Tensor:
        return self.head(self.encode(traj), traj.last_observation, action, z)


class BackwardNet(_Consumer):
    """``B(h)`` projected onto the sphere of radius sqrt(d)."""

    def __init__(self, rng, encoder: MemoryModel, d, dims, name="B", norm="rms"):
        self.encoder = encoder
        self.d = d
        self.mlp = MLP(rng, encoder.output_dim, dims, d, f"{name}.mlp", norm)

    def head(self, h) -> Tensor:
        return ad.l2_normalize(self.mlp(h), np.sqrt(self.d))

    def __call__(self, traj: Trajectory) -> Tensor:
        return self.head(self.encode(traj))


class FeatureNet(_Consumer):
    """Frozen random features ``phi`` for USFs; never trained."""

    def __init__(self, rng, encoder: MemoryModel, d, name="phi"):
        self.encoder = encoder
        self.mlp = MLP(rng, encoder.output_dim, (64,), d, f"{name}.mlp")
        self.set_trainable(False)

    def head(self, h) -> Tensor:
        return ad.tanh(self.mlp(h))

    def __call__(self, traj: Trajectory) -> Tensor:
        return self.head(self.encode(traj))


class PolicyNet(_Consumer):
    """Deterministic actor ``pi(h, o, z)`` with tanh output."""

    def __init__(self, rng, encoder: MemoryModel, in_dim, d, action_dim, dims, pre_dim,
                 name="pi", norm="rms"):
        self.encoder = encoder
        self.pre_h = Preprocessor(rng, encoder.output_dim, pre_dim, f"{name}.pre_h", norm)
        self.pre_oz = Preprocessor(rng, in_dim + d, pre_dim, f"{name}.pre_oz", norm)
        self.mlp = MLP(rng, 2 * pre_dim, dims, action_dim, f"{name}.mlp", norm)

    def head(self, h, last_obs, z) -> Tensor:
        x = ad.concat([self.pre_h(h), self.pre_oz(ad.concat([ad.as_tensor(last_obs),
                                                             ad.as_tensor(z)], -1))], -1)
        return ad.tanh(self.mlp(x))

    def __call__(self, traj: Trajectory, z) -> Tensor:
        return self.head(self.encode(traj), traj.last_observation, z)


def _frozen_copy(module: Module, prefix="target."):
    twin = copy.deepcopy(module)
    for p in twin.parameters():
        p.name = prefix + p.name
    twin.set_trainable(False)
    return twin


class FBModel(Module):
    """FB, FB-M and FB-stack share this class; the variant picks the encoders."""

    family = "fb"

    def __init__(self, cfg: ModelConfig, obs_dim, state_dim, action_space, seed=0):
        self.cfg = cfg
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.discrete = action_space.kind == "discrete"
        self.n_actions = action_space.n if self.discrete else None
        self.action_dim = action_space.n
        self.d = cfg.d
        rng = np.random.default_rng(seed)
        self.fwd_observed = sees_observations(cfg.routing, "forward")
        self.bwd_observed = sees_observations(cfg.routing, "backward")
        f_in = obs_dim if self.fwd_observed else state_dim
        b_in = obs_dim if self.bwd_observed else state_dim
        self.f_in, self.b_in = f_in, b_in

        def encoder(side_observed, in_dim, L_default, name):
            kind, L = _encoder_plan(cfg.variant, cfg, side_observed)
            return MemoryModel(kind, in_dim, self.action_dim, L or L_default, rng, name,
                               cfg.embed_dim, cfg.hidden_dim, cfg.stack_k, cfg.norm)

        self._build(rng, encoder, f_in, b_in)

    def _build(self, rng, encoder, f_in, b_in):
        cfg = self.cfg
        self.F = ForwardNet(rng, encoder(self.fwd_observed, f_in, cfg.context_length_forward, "f_F"),
                            f_in, self.action_dim, cfg.d, cfg.f_dims, cfg.pre_dim,
                            self.n_actions, "F", cfg.norm)
        self.B = BackwardNet(rng, encoder(self.bwd_observed, b_in, cfg.context_length_backward, "f_B"),
                             cfg.d, cfg.b_dims, "B", cfg.norm)
        if not self.discrete:
            self.pi = PolicyNet(rng, encoder(self.fwd_observed, f_in, cfg.context_length_forward, "f_pi"),
                                f_in, cfg.d, self.action_dim, cfg.pi_dims, cfg.pre_dim, "pi", cfg.norm)
        else:
            self.pi = None
        self.F_target = _frozen_copy(self.F)
        self.B_target = _frozen_copy(self.B)

    # ------------------------------------------------------------ wiring

    @property
    def L_forward(self) -> int:
        return self.F.encoder.context_length

    @property
    def L_backward(self) -> int:
        return self.B.encoder.context_length

    def online_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def critic_parameters(self):
        return self.F.parameters() + self.B.parameters()

    def actor_parameters(self):
        return [] if self.pi is None else self.pi.parameters()

    def targets(self):
        return [(self.F_target, self.F), (self.B_target, self.B)]

    def sync_targets(self):
        for tgt, src in self.targets():
            copy_params(tgt, src)

    def forward_view(self, batch):
        """The slice batch the forward/policy side reads."""
        return batch if self.fwd_observed else batch.states

    def backward_view(self, batch):
        return batch if self.bwd_observed else batch.states

    def needs_states(self) -> bool:
        return not (self.fwd_observed and self.bwd_observed)

    def wiring(self) -> dict:
        return {"F": (self.F.encoder.kind, "observations" if self.fwd_observed else "states"),
                "pi": (self.F.encoder.kind, "observations" if self.fwd_observed else "states"),
                "B": (self.B.encoder.kind, "observations" if self.bwd_observed else "states")}

    # ------------------------------------------------------------ acting

    def act_from_hidden(self, h_pi, last_obs, z, h_F=None):
        """Greedy action from encoded contexts (no tape)."""
        with ad.no_tape():
            if self.discrete:
                Fv = self.F.head(h_F, last_obs, None, z).data
                q = np.einsum("bad,bd->ba", Fv, np.asarray(z))
                return q.argmax(-1)
            return self.pi.head(h_pi, last_obs, z).data

    def act(self, traj: Trajectory, z):
        traj = traj.batched()
        with ad.no_tape():
            if self.discrete:
                return self.act_from_hidden(None, traj.last_observation, z, self.F.encode(traj))
            return self.act_from_hidden(self.pi.encode(traj), traj.last_observation, z)

    # ------------------------------------------------------------ checkpoints

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def state_arrays(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_arrays(self, arrays: dict):
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise ContractViolation(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ContractViolation(f"shape mismatch for {name}")
            p.data = np.array(arrays[name], dtype=np.float64)


class UsfModel(FBModel):
    """Universal successor features with memory; ``phi`` is frozen."""

    family = "usf"

    def _build(self, rng, encoder, f_in, b_in):
        cfg = self.cfg
        self.F = ForwardNet(rng, encoder(self.fwd_observed, f_in, cfg.context_length_forward, "f_psi"),
                            f_in, self.action_dim, cfg.d, cfg.f_dims, cfg.pre_dim,
                            self.n_actions, "psi", cfg.norm)
        # phi reads through its own frozen random encoder so it never moves
        self.B = FeatureNet(rng, encoder(self.bwd_observed, b_in, cfg.context_length_backward, "f_phi"),
                            cfg.d, "phi")
        self.B.set_trainable(False)
        if not self.discrete:
            self.pi = PolicyNet(rng, encoder(self.fwd_observed, f_in, cfg.context_length_forward, "f_pi"),
                                f_in, cfg.d, self.action_dim, cfg.pi_dims, cfg.pre_dim, "pi", cfg.norm)
        else:
            self.pi = None
        self.F_target = _frozen_copy(self.F)
        self.B_target = self.B

    @property
    def psi(self):
        return self.F

    @property
    def phi(self):
        return self.B

    def critic_parameters(self):
        return self.F.parameters()

    def targets(self):
        return [(self.F_target, self.F)]


def build_variant(variant: str, routing: str = "all", obs_dim=None, state_dim=None,
                  action_space=None, cfg: ModelConfig | None = None, seed=0, env=None,
                  occlusion=None):
    """Instantiate a model with encoders wired for ``variant`` and ``routing``."""
    if variant not in VARIANTS:
        raise ContractViolation(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if env is not None:
        spec = env.spec(occlusion)
        obs_dim, state_dim, action_space = spec.obs_dim, spec.state_dim, spec.action_space
    cfg = replace(cfg or ModelConfig(), variant=variant, routing=routing)
    cls = UsfModel if variant.startswith("usf") else FBModel
    return cls(cfg, obs_dim, state_dim, action_space, seed)


# ---------------------------------------------------------------- z sampling


def sample_sphere(rng, n, d) -> np.ndarray:
    g = rng.normal(size=(n, d))
    return np.sqrt(d) * g / np.linalg.norm(g, axis=1, keepdims=True)


def sample_z(rng, batch, d, backward_outputs=None, mix_ratio=0.5) -> np.ndarray:
    """Mix of uniform-sphere draws (prob ``mix_ratio``) and ``B`` outputs of dataset windows."""
    if not 0.0 <= mix_ratio <= 1.0:
        raise ContractViolation("mix_ratio must lie in [0, 1]")
    z = sample_sphere(rng, batch, d)
    if mix_ratio < 1.0:
        if backward_outputs is None or len(backward_outputs) == 0:
            raise ContractViolation("backward outputs required when mix_ratio < 1")
        bo = np.asarray(backward_outputs)
        use_b = rng.random(batch) >= mix_ratio
        rows = rng.integers(0, len(bo), size=batch)
        z = np.where(use_b[:, None], bo[rows], z)
    return z


# ---------------------------------------------------------------- losses


def fb_objective(F_t, B_future, B_next, F_next_target, B_future_target, gamma, lambda_orth):
    """The sampled FB objective from precomputed embeddings.

    ``F_t``, ``B_future``, ``B_next`` may be tracked tensors; the target
    embeddings are constants.  Returns ``(loss, parts)``.
    """
    F_t, B_future, B_next = ad.as_tensor(F_t), ad.as_tensor(B_future), ad.as_tensor(B_next)
    n, d = F_t.shape
    if n < 2:
        raise ContractViolation("FB loss needs a batch of at least 2")
    target_M = gamma * (np.asarray(F_next_target) @ np.asarray(B_future_target).T)
    M = ad.matmul(F_t, ad.transpose(B_future))
    off = ad.mean(ad.square(M - target_M))
    diag = -2.0 * ad.mean(ad.sum_(F_t * B_next, axis=-1))
    cov = ad.matmul(ad.transpose(B_future), B_future) * (1.0 / n)
    orth = ad.sum_(ad.square(cov - np.eye(d)))
    loss = off + diag + lambda_orth * orth
    return loss, {"td": float(off.data), "diag": float(diag.data), "orth": float(orth.data)}


def _select_action(F3: Tensor, actions_onehot) -> Tensor:
    return ad.sum_(F3 * np.asarray(actions_onehot)[:, :, None], axis=1)


def _next_action(model, fview, z, rng, smoothing):
    """Action at t+1 used inside the bootstrap target (no tape)."""
    with ad.no_tape():
        if model.discrete:
            Fn = model.F_target(fview.tau_next, None, z).data
            q = np.einsum("bad,bd->ba", Fn, z)
            return np.eye(model.n_actions)[q.argmax(-1)]
        a = model.pi(fview.tau_next, z).data
        if smoothing is not None and rng is not None:
            sigma, clip = smoothing
            a = smoothed_action(a, rng, sigma, clip)
        return a


def smoothed_action(a, rng, sigma, clip):
    """``a + clip(N(0, sigma^2), -clip, clip)`` then clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    if sigma == 0:
        return a.copy()
    noise = np.clip(rng.normal(0.0, sigma, size=a.shape), -clip, clip)
    return np.clip(a + noise, -1.0, 1.0)


def fb_td_loss(model: FBModel, batch, z, rng=None, smoothing=(0.2, 0.3)):
    """Critic loss for F and B on one slice batch.  Returns ``(loss, parts)``."""
    z = np.asarray(z, dtype=np.float64)
    fview, bview = model.forward_view(batch), model.backward_view(batch)
    a_next = _next_action(model, fview, z, rng, smoothing)
    with ad.no_tape():
        F_next = model.F_target(fview.tau_next, a_next, z).data
        if model.discrete:
            F_next = np.einsum("bad,ba->bd", F_next, a_next)
        B_fut_tgt = model.B_target(bview.tau_future).data
    F_t = model.F(fview.tau_t, fview.actions, z)
    if model.discrete:
        F_t = _select_action(F_t, fview.actions)
    B_future = model.B(bview.tau_future)
    B_next = model.B(bview.tau_next_b)
    return fb_objective(F_t, B_future, B_next, F_next, B_fut_tgt, model.cfg.gamma,
                        model.cfg.lambda_orth)


def policy_loss(model: FBModel, batch, z):
    """``-mean(F(h, pi(h, z), z)^T z)``; only the actor should be stepped with it."""
    if model.discrete:
        raise ContractViolation("discrete policies are exact argmax; no actor loss")
    z = np.asarray(z, dtype=np.float64)
    fview = model.forward_view(batch)
    with ad.no_tape():
        h_F = model.F.encode(fview.tau_t).data
    a = model.pi(fview.tau_t, z)
    Fv = model.F.head(h_F, fview.tau_t.last_observation, a, z)
    q = ad.sum_(Fv * z, axis=-1)
    return -1.0 * ad.mean(q)


def fb_q_value(model: FBModel, h, observation, action, z) -> np.ndarray:
    """``F(h, o, a, z)^T z`` for continuous or one-hot discrete actions."""
    with ad.no_tape():
        z = np.atleast_2d(z)
        Fv = model.F.head(np.atleast_2d(h), np.atleast_2d(observation),
                          None if model.discrete else np.atleast_2d(action), z).data
    if model.discrete:
        Fv = np.einsum("bad,ba->bd", Fv, np.atleast_2d(action))
    return (Fv * z).sum(-1)


def q_values(model: FBModel, traj: Trajectory, z) -> np.ndarray:
    """All-action Q values for a discrete model."""
    with ad.no_tape():
        Fv = model.F(traj.batched(), None, np.atleast_2d(z)).data
    return np.einsum("bad,bd->ba", Fv, np.atleast_2d(z))


def usf_td_loss(model: UsfModel, batch, z, rng=None, smoothing=(0.2, 0.3)):
    """``E||psi(h, a, z) - (phi(next) + gamma psi_target(h', pi(h', z), z))||^2``."""
    z = np.asarray(z, dtype=np.float64)
    fview, bview = model.forward_view(batch), model.backward_view(batch)
    a_next = _next_action(model, fview, z, rng, smoothing)
    with ad.no_tape():
        psi_next = model.F_target(fview.tau_next, a_next, z).data
        if model.discrete:
            psi_next = np.einsum("bad,ba->bd", psi_next, a_next)
        phi_next = model.phi(bview.tau_next_b).data
    target = phi_next + model.cfg.gamma * psi_next
    psi = model.F(fview.tau_t, fview.actions, z)
    if model.discrete:
        psi = _select_action(psi, fview.actions)
    loss = ad.mean(ad.sum_(ad.square(psi - target), axis=-1))
    return loss, {"td": float(loss.data)}


# ---------------------------------------------------------------- task inference


def _labelled_view(model, labelled):
    if model.bwd_observed:
        return labelled.trajectories
    if labelled.state_trajectories is None:
        raise ContractViolation("routing needs state windows in the labelled set")
    return labelled.state_trajectories


def _fit_context(model, traj: Trajectory) -> Trajectory:
    """Trim or left-pad labelled windows to the backward encoder's length."""
    L = model.L_backward
    if traj.length == L:
        return traj
    if traj.length > L:
        return Trajectory(traj.actions[:, -L:], traj.observations[:, -L:], traj.valid_mask[:, -L:])
    pad = L - traj.length
    n = traj.actions.shape[0]
    return Trajectory(np.concatenate([np.zeros((n, pad, traj.actions.shape[2])), traj.actions], 1),
                      np.concatenate([np.zeros((n, pad, traj.observations.shape[2])),
                                      traj.observations], 1),
                      np.concatenate([np.zeros((n, pad), bool), traj.valid_mask], 1))


def backward_embeddings(model, traj: Trajectory, chunk=4096) -> np.ndarray:
    traj = _fit_context(model, traj.batched())
    out = []
    with ad.no_tape():
        for i in range(0, traj.actions.shape[0], chunk):
            out.append(model.B(traj[i:i + chunk]).data)
    return np.concatenate(out)


def infer_task_fb(model: FBModel, labelled) -> LatentTask:
    """``z = mean_i r_i B(f_B(tau_i))``; not renormalised unless configured."""
    if len(labelled) == 0:
        raise ContractViolation("labelled set is empty")
    Bv = backward_embeddings(model, _labelled_view(model, labelled))
    z = (np.asarray(labelled.rewards)[:, None] * Bv).mean(0)
    if model.cfg.normalize_inferred_z:
        n = np.linalg.norm(z)
        if n > 0:
            z = z * np.sqrt(model.d) / n
    return LatentTask(z, "inferred")


def ridge_task(Phi, R, eps=1e-6) -> np.ndarray:
    Phi = np.asarray(Phi, dtype=np.float64)
    A = Phi.T @ Phi + eps * np.eye(Phi.shape[1])
    return np.linalg.solve(A, Phi.T @ np.asarray(R, dtype=np.float64))


def infer_task_usf(model: UsfModel, labelled, eps=1e-6) -> LatentTask:
    if len(labelled) == 0:
        raise ContractViolation("labelled set is empty")
    Phi = backward_embeddings(model, _labelled_view(model, labelled))
    return LatentTask(ridge_task(Phi, labelled.rewards, eps), "inferred")


def infer_task(model, labelled) -> LatentTask:
    if isinstance(model, UsfModel):
        return infer_task_usf(model, labelled)
    return infer_task_fb(model, labelled)


# ---------------------------------------------------------------- tabular FB


class TabularFB(Module):
    """F and B as lookup tables over a finite MDP, for a fixed policy.

    Used to check the FB objective against exact successor measures.
    ``f_scale`` multiplies the F table so Adam's step size matches the
    magnitude of ``M / rho`` under near-deterministic policies.
    """

    def __init__(self, n_states, n_actions, d, seed=0, scale=0.1, f_scale=1.0):
        rng = np.random.default_rng(seed)
        self.n_states, self.n_actions, self.d = n_states, n_actions, d
        self.f_scale = float(f_scale)
        self.F_table = ad.Parameter(rng.normal(0, scale, (n_states * n_actions, d)), "F_table")
        self.B_table = ad.Parameter(rng.normal(0, 1.0, (n_states, d)), "B_table")
        self.F_target = ad.Parameter(self.F_table.data.copy(), "target.F_table", trainable=False)
        self.B_target = ad.Parameter(self.B_table.data.copy(), "target.B_table", trainable=False)

    def forward(self, s, a, target=False) -> Tensor:
        table = self.F_target if target else self.F_table
        onehot = np.eye(self.n_states * self.n_actions)[np.asarray(s) * self.n_actions + np.asarray(a)]
        return ad.matmul(onehot, table) * self.f_scale

    def backward(self, s, target=False) -> Tensor:
        table = self.B_target if target else self.B_table
        return ad.l2_normalize(ad.matmul(np.eye(self.n_states)[np.asarray(s)], table),
                               np.sqrt(self.d))

    def successor_estimate(self, rho) -> np.ndarray:
        """``M_hat[s, a, s'] = F(s, a)^T B(s') rho(s')``."""
        with ad.no_tape():
            F = self.f_scale * self.F_table.data.reshape(self.n_states, self.n_actions, self.d)
            B = self.backward(np.arange(self.n_states)).data
        return np.einsum("sad,td->sat", F, B) * np.asarray(rho)[None, None, :]


def tabular_fb_loss(model: TabularFB, P, policy, rho, gamma, lambda_orth=1.0, weights=None):
    """The FB objective in closed-form expectation over a finite MDP.

    ``P`` is (S, A, S), ``policy`` an (S, A) matrix, ``rho`` the future
    distribution over states and ``weights`` the (S*A,) distribution of
    the anchors (uniform by default).  Minimised by ``F^T B = M / rho``.
    """
    S, A, d = model.n_states, model.n_actions, model.d
    rho = np.asarray(rho, dtype=np.float64)
    w = np.full(S * A, 1.0 / (S * A)) if weights is None else np.asarray(weights, dtype=np.float64)
    P2 = np.asarray(P, dtype=np.float64).reshape(S * A, S)
    # T[(s,a), (s1,a1)] = P(s1 | s, a) pi(a1 | s1)
    T = (P2[:, :, None] * np.asarray(policy)[None, :, :]).reshape(S * A, S * A)
    with ad.no_tape():
        F_next = T @ (model.f_scale * model.F_target.data)
        B_tgt = model.backward(np.arange(S), target=True).data
    target = gamma * (F_next @ B_tgt.T)
    F = model.F_table * model.f_scale
    B = model.backward(np.arange(S))
    M = ad.matmul(F, ad.transpose(B))  # (S*A, S)
    off = ad.sum_(ad.square(M - target) * (w[:, None] * rho[None, :]))
    diag = -2.0 * ad.sum_(M * (w[:, None] * P2))
    cov = ad.matmul(ad.transpose(B), B * rho[:, None])
    orth = ad.sum_(ad.square(cov - np.eye(d)))
    return off + diag + lambda_orth * orth


def fit_tabular_fb(P, policy, gamma, rho=None, d=None, steps=4000, lr=0.02, polyak=0.05,
                   lambda_orth=1.0, seed=0, f_scale=1.0) -> TabularFB:
    """Full-batch Adam on :func:`tabular_fb_loss` with Polyak-averaged targets."""
    P = np.asarray(P, dtype=np.float64)
    S, A = P.shape[0], P.shape[1]
    rho = np.full(S, 1.0 / S) if rho is None else np.asarray(rho, dtype=np.float64)
    model = TabularFB(S, A, d or S, seed=seed, f_scale=f_scale)
    opt = ad.Adam([model.F_table, model.B_table], lr=lr)
    for _ in range(steps):
        with ad.Tape() as tape:
            loss = tabular_fb_loss(model, P, policy, rho, gamma, lambda_orth)
        opt.step(tape.backward(loss))
        for tgt, src in ((model.F_target, model.F_table), (model.B_target, model.B_table)):
            tgt.data = (1.0 - polyak) * tgt.data + polyak * src.data
    return model


class TabularFBFamily(Module):
    """Tabular FB over a finite family of tasks.

    One forward table per task and a shared backward table.  Task k's
    policy is greedy on ``F_k(s, a)^T z_k`` with ``z_k = sum_s rho(s) r_k(s) B(s)``,
    so at the fixed point ``F_k B^T rho`` is the successor measure of a
    policy that is optimal for ``r_k`` (policy iteration, exact representation).
    """

    def __init__(self, n_states, n_actions, d, n_tasks, seed=0, scale=0.1):
        rng = np.random.default_rng(seed)
        self.n_states, self.n_actions, self.d, self.K = n_states, n_actions, d, n_tasks
        SA = n_states * n_actions
        self.F_tables = [ad.Parameter(rng.normal(0, scale, (SA, d)), f"F_table.{k}", trainable=False)
                         for k in range(n_tasks)]
        self.B_table = ad.Parameter(rng.normal(0, 1.0, (n_states, d)), "B_table")

    def backward_values(self) -> Tensor:
        return ad.l2_normalize(self.B_table, np.sqrt(self.d))

    def infer(self, reward, rho) -> np.ndarray:
        with ad.no_tape():
            B = self.backward_values().data
        return (np.asarray(rho) * np.asarray(reward)) @ B

    def q_table(self, k, z) -> np.ndarray:
        return (self.F_tables[k].data @ np.asarray(z)).reshape(self.n_states, self.n_actions)

    def successor_estimate(self, k, rho) -> np.ndarray:
        with ad.no_tape():
            B = self.backward_values().data
        F = self.F_tables[k].data.reshape(self.n_states, self.n_actions, self.d)
        return np.einsum("sad,td->sat", F, B) * np.asarray(rho)[None, None, :]


def fit_tabular_fb_family(P, gamma, rewards, rho=None, d=None, steps=2000, lr=0.01,
                          improve_every=300, lambda_orth=1.0, seed=0, polish_rounds=20,
                          polish_iters=1000) -> TabularFBFamily:
    """Fit :class:`TabularFBFamily` on the closed-form FB objective.

    The objective is quadratic in each F table for fixed B and bootstrap
    target, so F is set to its exact minimiser
    ``(target diag(rho) + P) B (B^T diag(rho) B)^-1`` every step while B
    takes an Adam step.  Greedy policies are refreshed every
    ``improve_every`` steps and held fixed in between.  A final polish
    freezes B and alternates F solves with greedy refreshes until no
    policy changes.
    """
    P = np.asarray(P, dtype=np.float64)
    S, A = P.shape[0], P.shape[1]
    rho = np.full(S, 1.0 / S) if rho is None else np.asarray(rho, dtype=np.float64)
    d = d or S
    rewards = [np.asarray(r, dtype=np.float64) for r in rewards]
    fam = TabularFBFamily(S, A, d, len(rewards), seed=seed)
    opt = ad.Adam([fam.B_table], lr=lr)
    w = np.full(S * A, 1.0 / (S * A))
    P2 = P.reshape(S * A, S)
    eye_a = np.eye(A)
    T = [None] * len(rewards)
    for it in range(steps):
        with ad.no_tape():
            Bn = fam.backward_values().data
        if it % improve_every == 0:
            for k, r in enumerate(rewards):
                greedy = eye_a[fam.q_table(k, (rho * r) @ Bn).argmax(-1)]
                # T[(s,a), (s1,a1)] = P(s1 | s, a) pi(a1 | s1)
                T[k] = (P2[:, :, None] * greedy[None, :, :]).reshape(S * A, S * A)
        C = Bn.T @ (Bn * rho[:, None])
        for k in range(len(rewards)):
            target = gamma * (T[k] @ fam.F_tables[k].data) @ Bn.T
            fam.F_tables[k].data = np.linalg.solve(C, ((target * rho + P2) @ Bn).T).T
        with ad.Tape() as tape:
            B = fam.backward_values()
            cov = ad.matmul(ad.transpose(B), B * rho[:, None])
            loss = lambda_orth * ad.sum_(ad.square(cov - np.eye(d)))
            for k in range(len(rewards)):
                F = fam.F_tables[k].data
                target = gamma * (T[k] @ F) @ Bn.T
                M = ad.matmul(F, ad.transpose(B))
                loss = loss + ad.sum_(ad.square(M - target) * (w[:, None] * rho[None, :]))
                loss = loss - 2.0 * ad.sum_(M * (w[:, None] * P2))
        opt.step(tape.backward(loss))

    with ad.no_tape():
        Bn = fam.backward_values().data
    C_inv_B = np.linalg.solve(Bn.T @ (Bn * rho[:, None]), Bn.T).T  # B C^-1
    prev = None
    for _ in range(polish_rounds):
        greedy = [fam.q_table(k, (rho * r) @ Bn).argmax(-1) for k, r in enumerate(rewards)]
        if prev is not None and all(np.array_equal(g, h) for g, h in zip(greedy, prev)):
            break
        prev = greedy
        for k, g in enumerate(greedy):
            Tk = (P2[:, :, None] * eye_a[g][None, :, :]).reshape(S * A, S * A)
            F = fam.F_tables[k].data
            for _ in range(polish_iters):
                F = ((gamma * (Tk @ F) @ Bn.T) * rho + P2) @ C_inv_B
            fam.F_tables[k].data = F
    return fam
