"""Desk-scale environments, task rewards, occlusion and dynamics wrappers.

Both environments are pure state machines: ``step`` and ``observe`` take the
state and an explicit numpy ``Generator`` and never mutate the environment.
States are plain float arrays; every function accepts a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .autodiff import ContractViolation

OCCLUSION_MODES = ("none", "noisy", "flickering", "hidden_velocity")
ROUTINGS = ("all", "backward_only", "forward_policy_only", "none")


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "discrete" | "continuous"
    n: int  # number of actions, or action dimension

    @property
    def dim(self) -> int:
        """Width of the action vector stored in datasets and trajectories."""
        return self.n


@dataclass(frozen=True)
class PomdpSpec:
    state_dim: int
    obs_dim: int
    action_space: ActionSpace
    gamma: float
    episode_length: int
    initial_distribution: str

    def __post_init__(self):
        if self.state_dim <= 0 or self.obs_dim <= 0 or self.episode_length < 1:
            raise ContractViolation(f"invalid spec dimensions: {self}")
        if not 0.0 <= self.gamma < 1.0:
            raise ContractViolation(f"discount must lie in [0, 1), got {self.gamma}")


@dataclass(frozen=True)
class OcclusionConfig:
    mode: str = "none"
    sigma_noise: float = 0.2
    p_flick: float = 0.2
    routing: str = "all"

    def __post_init__(self):
        if self.mode not in OCCLUSION_MODES:
            raise ContractViolation(f"unknown occlusion mode {self.mode!r}")
        if self.routing not in ROUTINGS:
            raise ContractViolation(f"unknown routing {self.routing!r}")
        if self.sigma_noise < 0:
            raise ContractViolation("sigma_noise must be >= 0")
        if not 0.0 <= self.p_flick <= 1.0:
            raise ContractViolation("p_flick must lie in [0, 1]")

    @property
    def tag(self) -> str:
        if self.mode == "noisy":
            return f"noisy{self.sigma_noise:g}"
        if self.mode == "flickering":
            return f"flickering{self.p_flick:g}"
        return self.mode


@dataclass(frozen=True)
class DynamicsConfig:
    mass_scale: float = 1.0
    damping_scale: float = 1.0

    def __post_init__(self):
        if not (self.mass_scale > 0 and self.damping_scale > 0):
            raise ContractViolation(f"dynamics scales must be positive: {self}")

    @classmethod
    def scaled(cls, factor: float) -> "DynamicsConfig":
        return cls(factor, factor)


@dataclass
class Observation:
    values: np.ndarray
    dropped_flag: bool = False


@dataclass
class TaskReward:
    task_id: str
    kind: str  # "goal" | "dense_velocity"
    reward_fn: Callable[[np.ndarray], np.ndarray]
    terminates: bool = False
    params: dict = field(default_factory=dict)

    def __call__(self, state):
        return self.reward_fn(np.asarray(state, dtype=np.float64))


def _rng(seed_or_rng):
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


class GridWorld:
    """N x N grid, 4 actions, slip to a uniformly random other direction.

    The Markov state is the one-hot encoding of the agent's cell.
    """

    name = "gridworld"
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))  # up, down, left, right

    def __init__(self, size=7, p_slip=Fraction(1, 10), gamma=0.98, episode_length=200,
                 init="uniform"):
        self.size = int(size)
        self.p_slip = Fraction(p_slip).limit_denominator(10 ** 6)
        self.gamma = gamma
        self.episode_length = episode_length
        if init not in ("uniform", "corner"):
            raise ContractViolation(f"unknown gridworld init {init!r}")
        self.init = init
        self.n_states = self.size * self.size
        self.n_actions = 4
        self.tasks = self._goal_tasks()
        self._P = None
        self._next = np.array([[self._move(i, b) for b in range(4)] for i in range(self.n_states)])

    def spec(self, occl: OcclusionConfig | None = None) -> PomdpSpec:
        if occl is not None and occl.mode == "hidden_velocity":
            raise ContractViolation("hidden_velocity occlusion needs the point-mass environment")
        return PomdpSpec(self.n_states, self.n_states, ActionSpace("discrete", self.n_actions),
                         self.gamma, self.episode_length, f"gridworld-{self.init}")

    @property
    def action_space(self):
        return ActionSpace("discrete", self.n_actions)

    def cell(self, index):
        return divmod(int(index), self.size)

    def index(self, row, col):
        return row * self.size + col

    def one_hot(self, index):
        index = np.asarray(index)
        out = np.zeros(index.shape + (self.n_states,))
        np.put_along_axis(out, index[..., None], 1.0, axis=-1)
        return out

    def state_index(self, state):
        return np.argmax(np.asarray(state), axis=-1)

    def reset(self, rng_seed, batch=None):
        rng = _rng(rng_seed)
        shape = () if batch is None else (batch,)
        if self.init == "corner":
            idx = np.zeros(shape, dtype=int)
        else:
            idx = rng.integers(0, self.n_states, size=shape)
        return self.one_hot(idx)

    def _move(self, index, action):
        r, c = self.cell(index)
        dr, dc = self.MOVES[action]
        nr, nc = r + dr, c + dc
        if 0 <= nr < self.size and 0 <= nc < self.size:
            return self.index(nr, nc)
        return int(index)

    def exact_transitions(self):
        """Transition probabilities as exact fractions: ``P[s][a] -> {s': p}``."""
        other = self.p_slip / 3
        table = []
        for s in range(self.n_states):
            row = []
            for a in range(4):
                probs: dict[int, Fraction] = {}
                for b in range(4):
                    p = 1 - self.p_slip if b == a else other
                    nxt = self._move(s, b)
                    probs[nxt] = probs.get(nxt, Fraction(0)) + p
                row.append(probs)
            table.append(row)
        return table

    def transition_matrix(self) -> np.ndarray:
        if self._P is None:
            P = np.zeros((self.n_states, 4, self.n_states))
            for s, row in enumerate(self.exact_transitions()):
                for a, probs in enumerate(row):
                    for nxt, p in probs.items():
                        P[s, a, nxt] = float(p)
            self._P = P
        return self._P

    def check_action(self, action):
        a = np.asarray(action)
        if not np.issubdtype(a.dtype, np.integer) and not np.all(a == np.round(a)):
            raise ContractViolation(f"gridworld action must be an integer, got {action!r}")
        if np.any(a < 0) or np.any(a >= self.n_actions):
            raise ContractViolation(f"gridworld action out of range: {action!r}")
        return a.astype(int)

    def step(self, state, action, rng=None, dynamics: DynamicsConfig | None = None, t=0):
        """Advance one step.  ``dynamics`` is accepted for interface parity and ignored."""
        a = self.check_action(action)
        rng = _rng(rng)
        idx = np.atleast_1d(self.state_index(state))
        a = np.broadcast_to(np.atleast_1d(a), idx.shape)
        slip = rng.random(idx.shape) < float(self.p_slip)
        offsets = rng.integers(1, 4, size=idx.shape)
        actual = np.where(slip, (a + offsets) % 4, a)
        nxt = self._next[idx, actual]
        if np.ndim(state) == 1:
            nxt = nxt[0]
        new_state = self.one_hot(nxt)
        rewards = {task.task_id: task(new_state) for task in self.tasks}
        return new_state, rewards, t + 1 >= self.episode_length

    def _goal_tasks(self):
        n = self.size - 1
        tasks = []
        for name, (r, c) in {"goal_tl": (0, 0), "goal_tr": (0, n),
                             "goal_bl": (n, 0), "goal_br": (n, n)}.items():
            idx = self.index(r, c)
            tasks.append(TaskReward(name, "goal", lambda s, i=idx: np.asarray(s)[..., i] * 1.0,
                                    terminates=True, params={"cell": [r, c]}))
        return tasks

    def reward_vector(self, task: TaskReward) -> np.ndarray:
        return task(np.eye(self.n_states))


class PointMass:
    """2-D point mass in the box [-1, 1]^2 with Euler integration.

    State is ``[pos_x, pos_y, vel_x, vel_y]``; actions are 2-D forces in
    [-1, 1].  Walls reflect the position and flip the velocity component.
    """

    name = "pointmass"

    def __init__(self, dt=0.05, g=1.0, mass=1.0, damping=0.5, v_clip=2.0, wall=1.0,
                 gamma=0.98, episode_length=200, goal_radius=0.15, goal_offset=0.75,
                 v_max=1.0, init_half_width=0.8):
        self.dt = dt
        self.g = g
        self.mass = mass
        self.damping = damping
        self.v_clip = v_clip
        self.wall = wall
        self.gamma = gamma
        self.episode_length = episode_length
        self.goal_radius = goal_radius
        self.goal_offset = goal_offset
        self.v_max = v_max
        self.init_half_width = init_half_width
        self.n_states = None
        self.tasks = self._tasks()

    @property
    def action_space(self):
        return ActionSpace("continuous", 2)

    def spec(self, occl: OcclusionConfig | None = None) -> PomdpSpec:
        obs_dim = 2 if occl is not None and occl.mode == "hidden_velocity" else 4
        return PomdpSpec(4, obs_dim, self.action_space, self.gamma, self.episode_length,
                         f"pointmass-uniform{self.init_half_width:g}")

    @property
    def initial_mean(self):
        return np.zeros(4)

    def reset(self, rng_seed, batch=None):
        rng = _rng(rng_seed)
        shape = (2,) if batch is None else (batch, 2)
        pos = rng.uniform(-self.init_half_width, self.init_half_width, size=shape)
        return np.concatenate([pos, np.zeros_like(pos)], axis=-1)

    def check_action(self, action):
        a = np.asarray(action, dtype=np.float64)
        if a.shape[-1:] != (2,):
            raise ContractViolation(f"point-mass action must have 2 components, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(np.abs(a) > 1.0 + 1e-12):
            raise ContractViolation(f"point-mass action outside [-1, 1]: {action!r}")
        return a

    def step(self, state, action, rng=None, dynamics: DynamicsConfig | None = None, t=0):
        a = self.check_action(action)
        dyn = dynamics or DynamicsConfig()
        state = np.asarray(state, dtype=np.float64)
        pos, vel = state[..., :2], state[..., 2:]
        accel = a * self.g / (self.mass * dyn.mass_scale) - self.damping * dyn.damping_scale * vel
        vel = np.clip(vel + accel * self.dt, -self.v_clip, self.v_clip)
        pos = pos + vel * self.dt
        hi = pos > self.wall
        lo = pos < -self.wall
        pos = np.where(hi, 2 * self.wall - pos, np.where(lo, -2 * self.wall - pos, pos))
        vel = np.where(hi | lo, -vel, vel)
        new_state = np.concatenate([pos, vel], axis=-1)
        rewards = {task.task_id: task(new_state) for task in self.tasks}
        return new_state, rewards, t + 1 >= self.episode_length

    def _tasks(self):
        tasks = []
        o, rad = self.goal_offset, self.goal_radius
        for name, target in {"reach_tl": (-o, o), "reach_tr": (o, o),
                             "reach_bl": (-o, -o), "reach_br": (o, -o)}.items():
            tgt = np.array(target)

            def goal(s, tgt=tgt):
                d = np.linalg.norm(s[..., :2] - tgt, axis=-1)
                return (d <= rad).astype(np.float64)

            tasks.append(TaskReward(name, "goal", goal, terminates=True,
                                    params={"target": list(target), "radius": rad}))
        for name, direction in {"run_px": (1.0, 0.0), "run_nx": (-1.0, 0.0),
                                "run_py": (0.0, 1.0), "run_ny": (0.0, -1.0)}.items():
            u = np.array(direction)

            def dense(s, u=u):
                return np.clip(s[..., 2:] @ u / self.v_max, 0.0, 1.0)

            tasks.append(TaskReward(name, "dense_velocity", dense,
                                    params={"direction": list(direction)}))
        return tasks


def make_env(name: str, **kwargs):
    if name == "gridworld":
        return GridWorld(**kwargs)
    if name in ("pointmass", "point_mass", "point-mass"):
        return PointMass(**kwargs)
    raise ContractViolation(f"unknown environment {name!r}")


def reset(env, rng_seed):
    return env.reset(rng_seed)


def step(env, state, action, dynamics: DynamicsConfig | None = None, rng=None, t=0):
    return env.step(state, action, rng=rng, dynamics=dynamics, t=t)


def observe_batch(states, occl: OcclusionConfig, rng, env=None):
    """Vectorised observation function: returns ``(values, dropped)``."""
    states = np.asarray(states, dtype=np.float64)
    batch_shape = states.shape[:-1]
    dropped = np.zeros(batch_shape, dtype=bool)
    if occl.mode == "none":
        return states.copy(), dropped
    if occl.mode == "noisy":
        noise = _rng(rng).normal(0.0, 1.0, size=states.shape)
        return states + occl.sigma_noise * noise, dropped
    if occl.mode == "flickering":
        dropped = _rng(rng).random(batch_shape) < occl.p_flick
        return np.where(dropped[..., None], 0.0, states), dropped
    if isinstance(env, GridWorld):
        raise ContractViolation("hidden_velocity occlusion needs the point-mass environment")
    return states[..., :2].copy(), dropped


def observe(state, occl: OcclusionConfig, rng, env=None) -> Observation:
    values, dropped = observe_batch(state, occl, rng, env)
    return Observation(values, bool(np.all(dropped)) if np.ndim(dropped) else bool(dropped))


@dataclass(frozen=True)
class DynamicsSplit:
    train: tuple[DynamicsConfig, ...]
    test: tuple[DynamicsConfig, ...]
    kind: str  # "interpolation" | "extrapolation" | "mixed" | "degenerate"

    def describe(self) -> dict:
        return {"kind": self.kind,
                "train": [d.mass_scale for d in self.train],
                "test": [d.mass_scale for d in self.test]}


def make_dynamics_split(train_scales, test_scales) -> DynamicsSplit:
    train = sorted(float(s) for s in train_scales)
    test = sorted(float(s) for s in test_scales)
    if not train or not test:
        raise ContractViolation("dynamics split needs non-empty train and test scales")
    if any(s <= 0 for s in train + test):
        raise ContractViolation("dynamics scales must be positive")
    lo, hi = train[0], train[-1]
    inside = [lo <= s <= hi for s in test]
    if train == test:
        kind = "degenerate"
    elif all(inside):
        kind = "interpolation"
    elif not any(inside):
        kind = "extrapolation"
    else:
        kind = "mixed"
    return DynamicsSplit(tuple(DynamicsConfig.scaled(s) for s in train),
                         tuple(DynamicsConfig.scaled(s) for s in test), kind)
