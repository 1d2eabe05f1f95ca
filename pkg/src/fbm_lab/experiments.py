"""Experiment harness: seeded train/eval runs, result caching, suites and sweeps.

A :class:`RunSpec` fully determines one training run and its evaluation.
Results are cached as JSON keyed by a hash of the spec, so suites that
share runs (the oracle-state baseline, say) train them once.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import ContractViolation
from .bfm import ModelConfig, build_variant
from .data import generate_dataset
from .envgen import DynamicsConfig, OcclusionConfig, make_dynamics_split, make_env
from .evalkit import (aggregate_score, bootstrap_aggregate_ci, evaluate_checkpoint, iqm,
                      labelled_sets, select_checkpoint)
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

CACHE_VERSION = 1
# bumped when recurrent encoders change behaviour; only keys of GRU variants include it
GRU_REVISION = 2
FAILURE_ROUTINGS = ("all", "backward_only", "forward_policy_only")
OCCLUSION_SWEEP = (0.05, 0.1, 0.2)
CONTEXT_SWEEP = (2, 4, 8, 16, 32)


@dataclass(frozen=True)
class RunSpec:
    variant: str = "fb"
    routing: str = "all"
    env: str = "point_mass"
    occlusion: str = "none"
    sigma_noise: float = 0.2
    p_flick: float = 0.2
    train_scales: tuple = (1.0,)
    test_scales: tuple = (1.0,)
    context_length: int = 8
    episodes: int = 100
    data_seed: int = 0
    seed: int = 0
    steps: int = 4000
    batch: int = 128
    lr: float = 1e-4
    checkpoint_every: int = 2000
    rollouts: int = 10
    labels_k: int = 1000
    normalize_z: bool = True

    def __post_init__(self):
        object.__setattr__(self, "train_scales", tuple(float(s) for s in self.train_scales))
        object.__setattr__(self, "test_scales", tuple(float(s) for s in self.test_scales))

    def occlusion_config(self) -> OcclusionConfig:
        return OcclusionConfig(self.occlusion, self.sigma_noise, self.p_flick, self.routing)

    def model_config(self) -> ModelConfig:
        L = self.context_length
        return ModelConfig(context_length_forward=L, context_length_backward=L,
                           normalize_inferred_z=self.normalize_z)

    def train_config(self) -> TrainConfig:
        return TrainConfig(learning_steps=self.steps, batch=self.batch, lr=self.lr,
                           checkpoint_every=self.checkpoint_every, seed=self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_scales"] = list(self.train_scales)
        d["test_scales"] = list(self.test_scales)
        return d

    def key(self) -> str:
        head = {"v": CACHE_VERSION}
        if self.variant in ("fb_m", "usf_m"):
            head["gru"] = GRU_REVISION
        blob = json.dumps({**head, **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:20]

    @property
    def condition(self) -> "RunSpec":
        """The spec with the seed zeroed: runs sharing it are seed replicates."""
        return replace(self, seed=0)

    @property
    def label(self) -> str:
        occ = self.occlusion_config().tag
        out = f"{self.variant}/{self.routing}/{occ}"
        if self.train_scales != (1.0,):
            out += "/train" + "+".join(f"{s:g}" for s in self.train_scales)
        if self.context_length != 8:
            out += f"/L{self.context_length}"
        return out


@dataclass
class RunResult:
    spec: RunSpec
    # scores[step][scale][task] = list of rollout returns
    scores: dict
    wall_seconds: float = 0.0
    metrics: list = field(default_factory=list)

    def steps(self) -> list[int]:
        return sorted(self.scores)

    def all_task_iqm(self, step, scale) -> float:
        return iqm([iqm(r) for r in self.scores[step][scale].values()])

    def to_json(self) -> dict:
        return {"spec": self.spec.to_dict(), "key": self.spec.key(),
                "wall_seconds": self.wall_seconds, "metrics": self.metrics,
                "scores": {str(st): {repr(sc): v for sc, v in by.items()}
                           for st, by in self.scores.items()}}

    @classmethod
    def from_json(cls, d: dict) -> "RunResult":
        spec = RunSpec(**d["spec"])
        scores = {int(st): {float(sc): {t: list(r) for t, r in v.items()} for sc, v in by.items()}
                  for st, by in d["scores"].items()}
        return cls(spec, scores, d.get("wall_seconds", 0.0), d.get("metrics", []))


# ---------------------------------------------------------------- datasets

_DATASETS: dict = {}


def dataset_for(spec: RunSpec):
    """Offline dataset shared by every run with the same data settings."""
    key = (spec.env, spec.occlusion, spec.sigma_noise, spec.p_flick, spec.train_scales,
           spec.episodes, spec.data_seed)
    if key not in _DATASETS:
        env = make_env(spec.env)
        occ = OcclusionConfig(spec.occlusion, spec.sigma_noise, spec.p_flick)
        dyn = [DynamicsConfig.scaled(s) for s in spec.train_scales]
        if len(_DATASETS) > 8:
            _DATASETS.clear()
        _DATASETS[key] = generate_dataset(env, "ou_explore", spec.episodes, spec.data_seed, occ, dyn)
    return _DATASETS[key]


# ---------------------------------------------------------------- single runs


def execute(spec: RunSpec) -> RunResult:
    """Train one model and evaluate every checkpoint on every test scale."""
    t0 = time.time()
    env = make_env(spec.env)
    occ = spec.occlusion_config()
    ds = dataset_for(spec)
    model = build_variant(spec.variant, spec.routing, env=env, occlusion=occ,
                          cfg=spec.model_config(), seed=spec.seed)
    labelled = labelled_sets(ds, env.tasks, spec.labels_k, spec.seed, model.L_backward,
                             model.needs_states())
    scores = {}

    def on_checkpoint(step, m):
        scores[step] = {}
        for scale in spec.test_scales:
            rows = evaluate_checkpoint(m, env, env.tasks, labelled, spec.rollouts,
                                       seed=10_000 + spec.seed, occlusion=occ,
                                       dynamics=DynamicsConfig.scaled(scale))
            scores[step][scale] = {r.task: [float(x) for x in r.returns] for r in rows}

    res = train(model, ds, spec.train_config(), callback=on_checkpoint)
    out = RunResult(spec, scores, time.time() - t0, res.metrics)
    log.info("run %s seed %d: %.1fs", spec.label, spec.seed, out.wall_seconds)
    return out


def default_cache_dir() -> str:
    return os.environ.get("FBM_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "fbm_lab"))


def run(spec: RunSpec, cache_dir=None, use_cache=True) -> RunResult:
    cache_dir = cache_dir or default_cache_dir()
    path = os.path.join(cache_dir, f"{spec.key()}.json")
    if use_cache and os.path.exists(path):
        with open(path) as fh:
            cached = RunResult.from_json(json.load(fh))
        if cached.spec == spec:
            return cached
    result = execute(spec)
    os.makedirs(cache_dir, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(result.to_json(), fh)
    os.replace(tmp, path)
    return result


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("FBM_THREADS")
    avail = os.cpu_count() or 1
    limit = int(cap) if cap else avail
    return max(1, min(limit, n_jobs))


def _run_job(args):
    spec, cache_dir, use_cache = args
    return run(spec, cache_dir, use_cache)


def run_all(specs, cache_dir=None, use_cache=True, workers=None) -> list[RunResult]:
    """Run (or load) every spec; process-parallel when more than one worker."""
    specs = list(specs)
    workers = worker_count(len(specs)) if workers is None else workers
    jobs = [(s, cache_dir, use_cache) for s in specs]
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


# ---------------------------------------------------------------- aggregation


@dataclass
class ConditionScore:
    """Seed-aggregated score of one condition on one test scale."""

    condition: RunSpec
    scale: float
    step: int
    point: float
    lo: float
    hi: float
    seeds: list
    per_seed: list  # all-task IQM per seed at the selected step
    per_task: dict  # task -> list of per-seed task scores
    cells: list = field(repr=False, default_factory=list)
    normalized: float = float("nan")

    @property
    def label(self) -> str:
        return self.condition.label

    def separated_below(self, other: "ConditionScore") -> bool:
        """True when this CI lies strictly below ``other``'s CI."""
        return self.hi < other.lo


def summarise(results: list[RunResult], scale=None, resamples=1000) -> ConditionScore:
    """Select the checkpoint by seed-averaged all-task IQM, then bootstrap."""
    if not results:
        raise ContractViolation("no runs to summarise")
    cond = results[0].spec.condition
    if any(r.spec.condition != cond for r in results):
        raise ContractViolation("runs being summarised belong to different conditions")
    scale = cond.test_scales[0] if scale is None else float(scale)
    steps = sorted(set.intersection(*(set(r.steps()) for r in results)))
    by_step = {st: [r.all_task_iqm(st, scale) for r in results] for st in steps}
    best = select_checkpoint(by_step)
    cells, per_task = [], {}
    for r in results:
        for task, returns in r.scores[best][scale].items():
            cells.append(np.asarray(returns))
            per_task.setdefault(task, []).append(iqm(returns))
    point = aggregate_score(cells)
    lo, hi = bootstrap_aggregate_ci(cells, resamples, rng=np.random.default_rng(0))
    return ConditionScore(cond, scale, best, point, lo, hi, [r.spec.seed for r in results],
                          by_step[best], per_task, cells)


def normalise(score: ConditionScore, baseline: ConditionScore) -> ConditionScore:
    score.normalized = score.point / baseline.point if baseline.point != 0 else float("nan")
    return score


def seeds_of(spec: RunSpec, seeds) -> list[RunSpec]:
    return [replace(spec, seed=int(s)) for s in seeds]


def _grouped(specs, results):
    groups: dict = {}
    for s, r in zip(specs, results):
        groups.setdefault(s.condition, []).append(r)
    return groups


# ---------------------------------------------------------------- suites


def oracle_state_baseline(base: RunSpec) -> RunSpec:
    """Memory-free FB reading Markov states on the same data."""
    return replace(base, variant="fb", routing="none")


def failure_mode_suite(base: RunSpec, variants=("fb",), routings=FAILURE_ROUTINGS, seeds=range(5),
                       cache_dir=None, use_cache=True, workers=None) -> dict:
    """Each routing of each variant, normalised against the oracle-state run."""
    conds = [oracle_state_baseline(base)]
    conds += [replace(base, variant=v, routing=r) for v in variants for r in routings]
    return _suite(conds, conds[0], seeds, cache_dir, use_cache, workers)


def memory_suite(base: RunSpec, variants=("fb", "fb_stack", "fb_m"), seeds=range(5),
                 cache_dir=None, use_cache=True, workers=None) -> dict:
    """Memory variants on one occlusion, plus the oracle-state baseline."""
    baseline = oracle_state_baseline(base)
    conds = [baseline] + [replace(base, variant=v, routing="all") for v in variants]
    return _suite(conds, baseline, seeds, cache_dir, use_cache, workers)


def _suite(conds, baseline, seeds, cache_dir, use_cache, workers) -> dict:
    conds = list(dict.fromkeys(c.condition for c in conds))
    specs = [s for c in conds for s in seeds_of(c, seeds)]
    results = run_all(specs, cache_dir, use_cache, workers)
    groups = _grouped(specs, results)
    out = {}
    for scale in baseline.test_scales:
        base_score = summarise(groups[baseline.condition], scale)
        for c in conds:
            out[(c.label, scale)] = normalise(summarise(groups[c], scale), base_score)
    return out


def dynamics_split_suite(base: RunSpec, variants=("fb", "fb_stack", "fb_m"),
                         train_scales=(0.5, 1.5), test_scales=(1.0, 2.0), seeds=range(5),
                         cache_dir=None, use_cache=True, workers=None) -> dict:
    """Train on ``train_scales``, score every method on each test scale.

    Returns ``{variant: {"interpolation": score, "extrapolation": score}}``
    keyed by the split kind of each test scale.
    """
    base = replace(base, train_scales=tuple(train_scales), test_scales=tuple(test_scales),
                   routing="all")
    conds = [replace(base, variant=v) for v in variants]
    specs = [s for c in conds for s in seeds_of(c, seeds)]
    results = run_all(specs, cache_dir, use_cache, workers)
    groups = _grouped(specs, results)
    out = {}
    baseline = {sc: summarise(groups[conds[0].condition], sc) for sc in test_scales}
    for c in conds:
        out[c.variant] = {}
        for sc in test_scales:
            kind = make_dynamics_split(train_scales, [sc]).kind
            out[c.variant][kind] = normalise(summarise(groups[c.condition], sc), baseline[sc])
    return out


def occlusion_sweep(base: RunSpec, values=OCCLUSION_SWEEP, variants=("fb", "fb_m"), seeds=range(5),
                    cache_dir=None, use_cache=True, workers=None) -> dict:
    """Noise std sweep on ``noisy`` and drop probability sweep on ``flickering``."""
    conds = []
    for v in values:
        for variant in variants:
            conds.append(replace(base, variant=variant, routing="all", occlusion="noisy",
                                 sigma_noise=float(v)))
            conds.append(replace(base, variant=variant, routing="all", occlusion="flickering",
                                 p_flick=float(v)))
    baseline = oracle_state_baseline(replace(base, occlusion="none"))
    return _suite([baseline] + conds, baseline, seeds, cache_dir, use_cache, workers)


def context_sweep(base: RunSpec, lengths=CONTEXT_SWEEP, variant="fb_m", seeds=range(5),
                  cache_dir=None, use_cache=True, workers=None) -> dict:
    conds = [replace(base, variant=variant, routing="all", context_length=int(L)) for L in lengths]
    baseline = oracle_state_baseline(base)
    return _suite([baseline] + conds, baseline, seeds, cache_dir, use_cache, workers)


# ---------------------------------------------------------------- eval rows

EVAL_FIELDS = ("variant", "routing", "env", "occlusion", "dynamics", "task", "seed",
               "checkpoint", "score", "mean_return", "returns")


def eval_rows(results: list[RunResult]) -> list[dict]:
    """One row per (run, checkpoint, test scale, task)."""
    rows = []
    for r in results:
        s = r.spec
        for step in r.steps():
            for scale, by_task in sorted(r.scores[step].items()):
                for task, returns in by_task.items():
                    rows.append({"variant": s.variant, "routing": s.routing, "env": s.env,
                                 "occlusion": s.occlusion_config().tag,
                                 "dynamics": f"{scale:g}", "task": task, "seed": s.seed,
                                 "checkpoint": step, "score": iqm(returns),
                                 "mean_return": float(np.mean(returns)),
                                 "returns": " ".join(f"{x:.17g}" for x in returns)})
    return rows
