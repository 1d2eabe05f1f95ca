"""Reward-free offline datasets: generation, storage, window sampling, labelling."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ContractViolation, read_container, write_container
from .envgen import DynamicsConfig, GridWorld, OcclusionConfig, observe_batch
from .memory import Trajectory

SCHEMA_VERSION = 1


@dataclass
class Episode:
    states: np.ndarray  # (T+1, state_dim)
    observations: np.ndarray  # (T+1, obs_dim)
    actions: np.ndarray  # (T, action_dim); one-hot for discrete actions
    dropped: np.ndarray  # (T+1,) flicker diagnostics, never served to agents
    dynamics: DynamicsConfig = field(default_factory=DynamicsConfig)

    @property
    def length(self) -> int:
        return len(self.actions)


def env_signature(env) -> dict:
    sig = {"env": env.name}
    for k, v in sorted(vars(env).items()):
        if isinstance(v, (int, float, str)) and not k.startswith("_"):
            sig[k] = v
    if isinstance(env, GridWorld):
        sig["p_slip"] = str(env.p_slip)
    return sig


def spec_hash(env) -> str:
    blob = json.dumps(env_signature(env), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class OfflineDataset:
    """Episodes plus flat per-observation arrays used for fast window gathers."""

    def __init__(self, episodes: list[Episode], meta: dict):
        if not episodes:
            raise ContractViolation("dataset has no episodes")
        self.episodes = episodes
        self.meta = meta
        lengths = np.array([e.length for e in episodes])
        self.lengths = lengths
        self.starts = np.concatenate([[0], np.cumsum(lengths + 1)[:-1]])
        self.states = np.concatenate([e.states for e in episodes])
        self.observations = np.concatenate([e.observations for e in episodes])
        prev = []
        for e in episodes:
            prev.append(np.vstack([np.zeros((1, e.actions.shape[1])), e.actions]))
        # prev_actions[i] is the action that led to observation i
        self.prev_actions = np.concatenate(prev)
        # anchors: every (episode, t) with a successor, t in [0, T-1]
        self.anchor_episode = np.repeat(np.arange(len(episodes)), lengths)
        self.anchor_t = np.concatenate([np.arange(n) for n in lengths])
        self.dynamics_tags = [(e.dynamics.mass_scale, e.dynamics.damping_scale) for e in episodes]

    @property
    def n_transitions(self) -> int:
        return int(self.lengths.sum())

    @property
    def state_dim(self):
        return self.states.shape[1]

    @property
    def obs_dim(self):
        return self.observations.shape[1]

    @property
    def action_dim(self):
        return self.prev_actions.shape[1]

    @property
    def occlusion(self) -> OcclusionConfig:
        return OcclusionConfig(**self.meta["occlusion"])

    def gather(self, episode_idx, t, L, source="observations") -> Trajectory:
        """Windows of length ``L`` ending at step ``t`` of each listed episode."""
        episode_idx = np.asarray(episode_idx)
        t = np.asarray(t)
        offs = np.arange(-L + 1, 1)
        local = t[:, None] + offs[None, :]
        valid = local >= 0
        flat = self.starts[episode_idx][:, None] + np.where(valid, local, 0)
        table = self.states if source == "states" else self.observations
        obs = table[flat] * valid[..., None]
        acts = self.prev_actions[flat] * valid[..., None]
        return Trajectory(acts, obs, valid)

    @classmethod
    def merge(cls, datasets: list["OfflineDataset"]) -> "OfflineDataset":
        """Union of datasets; every episode keeps its own dynamics tag."""
        episodes = [e for ds in datasets for e in ds.episodes]
        meta = dict(datasets[0].meta)
        meta["merged_from"] = [ds.meta.get("seed") for ds in datasets]
        meta["dynamics"] = [list(t) for t in sorted({tuple(t) for ds in datasets for t in ds.dynamics_tags})]
        return cls(episodes, meta)

    # ------------------------------------------------------------ storage

    def save(self, path) -> None:
        header = {"kind": "dataset", "schema": SCHEMA_VERSION, "meta": self.meta,
                  "episodes": [{"length": int(e.length),
                                "dynamics": [e.dynamics.mass_scale, e.dynamics.damping_scale]}
                               for e in self.episodes]}
        arrays = []
        for i, e in enumerate(self.episodes):
            arrays += [(f"ep{i}.states", e.states), (f"ep{i}.observations", e.observations),
                       (f"ep{i}.actions", e.actions), (f"ep{i}.dropped", e.dropped.astype(np.float64))]
        write_container(path, header, arrays)

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        manifest, arrays = read_container(path)
        if manifest.get("kind") != "dataset":
            raise ContractViolation(f"{path}: not a dataset file")
        episodes = []
        for i, info in enumerate(manifest["episodes"]):
            episodes.append(Episode(arrays[f"ep{i}.states"], arrays[f"ep{i}.observations"],
                                    arrays[f"ep{i}.actions"], arrays[f"ep{i}.dropped"] > 0.5,
                                    DynamicsConfig(*info["dynamics"])))
        return cls(episodes, manifest["meta"])


# ---------------------------------------------------------------- generation


class Behaviour:
    """Exploratory behaviour policies; ``reset`` starts an episode."""

    def __init__(self, kind="ou_explore", theta=0.15, sigma=0.3):
        if kind not in ("uniform_random", "ou_explore"):
            raise ContractViolation(f"unknown behaviour policy {kind!r}")
        self.kind = kind
        self.theta = theta
        self.sigma = sigma

    @property
    def id(self) -> str:
        if self.kind == "uniform_random":
            return "uniform_random"
        return f"ou_explore(theta={self.theta:g},sigma={self.sigma:g})"

    def reset(self, env, rng):
        if env.action_space.kind == "discrete":
            self._prev = int(rng.integers(env.action_space.n))
        else:
            self._x = rng.uniform(-1.0, 1.0, size=env.action_space.n)

    def act(self, env, rng):
        space = env.action_space
        if space.kind == "discrete":
            if self.kind == "ou_explore" and rng.random() >= self.theta:
                return self._prev
            self._prev = int(rng.integers(space.n))
            return self._prev
        if self.kind == "uniform_random":
            return rng.uniform(-1.0, 1.0, size=space.n)
        # Ornstein-Uhlenbeck around zero
        self._x = self._x - self.theta * self._x + self.sigma * rng.normal(size=space.n)
        return np.clip(self._x, -1.0, 1.0)


def _encode_action(env, a):
    if env.action_space.kind == "discrete":
        out = np.zeros(env.action_space.n)
        out[int(a)] = 1.0
        return out
    return np.asarray(a, dtype=np.float64)


def generate_episode(env, behaviour: Behaviour, occlusion: OcclusionConfig,
                     dynamics: DynamicsConfig, seed: int) -> Episode:
    rng = np.random.default_rng(seed)
    T = env.episode_length
    state = env.reset(rng)
    behaviour.reset(env, rng)
    states = [state]
    actions = []
    for t in range(T):
        a = behaviour.act(env, rng)
        state, _, _ = env.step(state, a, rng=rng, dynamics=dynamics, t=t)
        states.append(state)
        actions.append(_encode_action(env, a))
    states = np.array(states)
    obs, dropped = observe_batch(states, occlusion, rng, env)
    return Episode(states, obs, np.array(actions), dropped, dynamics)


def generate_dataset(env, behaviour: Behaviour | str = "ou_explore", episodes: int = 100,
                     seed: int = 0, occlusion: OcclusionConfig | None = None,
                     dynamics=None) -> OfflineDataset:
    """Roll out the behaviour policy; episode ``i`` uses seed ``seed + i``.

    ``dynamics`` is a single config or a list cycled over episodes.
    """
    if episodes < 1:
        raise ContractViolation("need at least one episode")
    if isinstance(behaviour, str):
        behaviour = Behaviour(behaviour)
    occlusion = occlusion or OcclusionConfig()
    if dynamics is None:
        dyn_list = [DynamicsConfig()]
    elif isinstance(dynamics, DynamicsConfig):
        dyn_list = [dynamics]
    else:
        dyn_list = list(dynamics)
    eps = [generate_episode(env, behaviour, occlusion, dyn_list[i % len(dyn_list)], seed + i)
           for i in range(episodes)]
    occl = asdict(occlusion)
    meta = {"env": env_signature(env), "spec_hash": spec_hash(env), "occlusion": occl,
            "behaviour": behaviour.id, "seed": int(seed), "schema": SCHEMA_VERSION,
            "action_kind": env.action_space.kind,
            "dynamics": [list(t) for t in sorted({(d.mass_scale, d.damping_scale) for d in dyn_list})]}
    return OfflineDataset(eps, meta)


# ---------------------------------------------------------------- sampling


@dataclass
class SliceBatch:
    tau_t: Trajectory  # forward context at t
    tau_next: Trajectory  # forward context at t+1
    tau_next_b: Trajectory  # backward context at t+1
    tau_future: Trajectory  # backward context at an independent index (rho sample)
    actions: np.ndarray  # a_t
    final_states: np.ndarray  # s_{t+1}
    future_states: np.ndarray
    episode: np.ndarray
    t: np.ndarray
    states: "SliceBatch | None" = None  # same windows over Markov states

    def __len__(self):
        return len(self.actions)


def sample_slices(dataset: OfflineDataset, batch: int, L_forward: int, L_backward: int, rng,
                  include_states: bool = False) -> SliceBatch:
    """Uniform anchors over all (episode, t); futures drawn independently."""
    if L_forward < 1 or L_backward < 1:
        raise ContractViolation("context lengths must be >= 1")
    n = len(dataset.anchor_t)
    if n == 0:
        raise ContractViolation("dataset is empty")
    pick = rng.integers(0, n, size=batch)
    ep, t = dataset.anchor_episode[pick], dataset.anchor_t[pick]
    fpick = rng.integers(0, n, size=batch)
    fep, ft = dataset.anchor_episode[fpick], dataset.anchor_t[fpick] + 1

    def build(source):
        return SliceBatch(
            dataset.gather(ep, t, L_forward, source),
            dataset.gather(ep, t + 1, L_forward, source),
            dataset.gather(ep, t + 1, L_backward, source),
            dataset.gather(fep, ft, L_backward, source),
            dataset.prev_actions[dataset.starts[ep] + t + 1],
            dataset.states[dataset.starts[ep] + t + 1],
            dataset.states[dataset.starts[fep] + ft],
            ep, t)

    out = build("observations")
    if include_states:
        out.states = build("states")
    return out


@dataclass
class LabelledSet:
    trajectories: Trajectory  # observation windows
    rewards: np.ndarray
    final_states: np.ndarray
    state_trajectories: Trajectory | None = None  # only for privileged routing
    task_id: str = ""

    def __len__(self):
        return len(self.rewards)


def build_labelled_set(dataset: OfflineDataset, task, k: int, rng, L: int = 1,
                       include_states: bool = False) -> LabelledSet:
    """``k`` uniformly sampled windows labelled with the task reward of their final state."""
    if k <= 0:
        raise ContractViolation("k must be positive")
    total = len(dataset.observations)
    if k > total:
        raise ContractViolation(f"k={k} exceeds the {total} stored steps")
    # any stored step can end a window, including t = 0 and t = T
    ep = np.repeat(np.arange(len(dataset.episodes)), dataset.lengths + 1)
    t = np.concatenate([np.arange(n + 1) for n in dataset.lengths])
    pick = rng.choice(total, size=k, replace=False)
    ep, t = ep[pick], t[pick]
    finals = dataset.states[dataset.starts[ep] + t]
    rewards = np.asarray(task(finals), dtype=np.float64)
    traj = dataset.gather(ep, t, L, "observations")
    straj = dataset.gather(ep, t, L, "states") if include_states else None
    return LabelledSet(traj, rewards, finals, straj, task.task_id)
