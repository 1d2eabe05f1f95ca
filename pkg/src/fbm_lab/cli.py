"""``fbm-lab`` command line: gen-data, train, eval, sweep, oracle-check, report.

Exit codes: 0 success, 1 contract violation, 2 usage error.  Every output
directory receives one ``manifest.json`` describing how it was produced.
"""
from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace

from . import __version__
from . import config as cfgmod
from .autodiff import ContractViolation

SCHEMAS = {"dataset": 1, "checkpoint": 1, "eval_csv": 1, "manifest": 1}
log = logging.getLogger("fbm_lab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        valid = sorted({s for a in self._actions for s in a.option_strings})
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}\nvalid flags: {' '.join(valid)}")


# ---------------------------------------------------------------- manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, argv, resolved: dict, seed, started) -> str:
    """Record the invocation and hash every artifact in ``out_dir``."""
    artifacts = {}
    for path in sorted(glob.glob(os.path.join(out_dir, "**", "*"), recursive=True)):
        if os.path.isfile(path) and os.path.basename(path) != "manifest.json":
            artifacts[os.path.relpath(path, out_dir)] = _sha256(path)
    manifest = {"command": ["fbm-lab"] + list(argv), "version": __version__,
                "config": resolved, "seed": seed, "schemas": SCHEMAS,
                "artifacts": artifacts, "wall_clock_seconds": round(time.time() - started, 3)}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


# ---------------------------------------------------------------- helpers


def _occlusion(cfg):
    from .envgen import OcclusionConfig

    o = cfg["occlusion"]
    return OcclusionConfig(o["mode"], float(o["sigma_noise"]), float(o["p_flick"]),
                           cfg["model"].get("routing", o.get("routing", "all")))


def _env(cfg):
    from .envgen import make_env

    e = cfg["env"]
    if e["name"] == "gridworld":
        return make_env("gridworld", size=int(e.get("size", 7)),
                        episode_length=int(e.get("episode_length", 200)), init=e.get("init", "uniform"))
    return make_env(e["name"], episode_length=int(e.get("episode_length", 200)))


def _scales(values):
    if values is None:
        return None
    out = []
    for v in values if isinstance(values, (list, tuple)) else [values]:
        out += [float(x) for x in str(v).replace(",", " ").split()]
    return out


def _env_from_meta(meta):
    from .envgen import make_env

    sig = dict(meta["env"])
    name = sig.pop("env")
    if name == "gridworld":
        return make_env(name, size=sig["size"], episode_length=sig["episode_length"],
                        gamma=sig["gamma"], init=sig.get("init", "uniform"))
    keys = ("dt", "g", "mass", "damping", "v_clip", "wall", "gamma", "episode_length",
            "goal_radius", "goal_offset", "v_max", "init_half_width")
    return make_env(name, **{k: sig[k] for k in keys if k in sig})


def _overrides(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects section.key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = cfgmod.parse_value(v)
    return out


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, argv, started):
    from .data import generate_dataset
    from .envgen import DynamicsConfig

    cfg = cfgmod.resolve(args.config, {
        "env.name": args.env, "occlusion.mode": args.occlusion,
        "occlusion.sigma_noise": args.sigma_noise, "occlusion.p_flick": args.p_flick,
        "data.episodes": args.episodes, "data.seed": args.seed,
        "data.behaviour": args.behaviour, **_overrides(args.set)})
    scales = _scales(args.dynamics_scale) or [cfgmod.get_key(cfg, "dynamics.mass_scale", 1.0)]
    cfg["dynamics"]["scales"] = scales
    env = _env(cfg)
    ds = generate_dataset(env, cfg["data"]["behaviour"], int(cfg["data"]["episodes"]),
                          int(cfg["data"]["seed"]), _occlusion(cfg),
                          [DynamicsConfig.scaled(s) for s in scales])
    os.makedirs(args.out, exist_ok=True)
    ds.save(os.path.join(args.out, "dataset.fbd"))
    write_manifest(args.out, argv, cfg, int(cfg["data"]["seed"]), started)
    print(f"wrote {ds.n_transitions} transitions to {args.out}/dataset.fbd")


def _dataset_path(p):
    if os.path.isdir(p):
        p = os.path.join(p, "dataset.fbd")
    if not os.path.exists(p):
        raise ContractViolation(f"dataset not found: {p}")
    return p


def cmd_train(args, argv, started):
    from .bfm import ModelConfig, build_variant
    from .data import OfflineDataset
    from .trainer import TrainConfig, train

    cfg = cfgmod.resolve(args.config, {
        "model.variant": args.variant, "model.routing": args.routing, "train.seed": args.seed,
        "train.learning_steps": args.steps, "train.batch": args.batch, "train.lr": args.lr,
        "train.checkpoint_every": args.checkpoint_every,
        "model.context_length": args.context_length, **_overrides(args.set)})
    ds_path = _dataset_path(args.dataset)
    ds = OfflineDataset.load(ds_path)
    env = _env_from_meta(ds.meta)
    m, t = cfg["model"], cfg["train"]
    L = int(m.get("context_length", 8))
    extra = {k: m[k] for k in ("d", "lambda_orth", "norm", "normalize_inferred_z", "stack_k",
                               "hidden_dim", "embed_dim", "pre_dim") if k in m}
    if args.paper_scale:
        mcfg = ModelConfig.paper_scale(**extra)
    else:
        mcfg = ModelConfig(context_length_forward=L, context_length_backward=L, **extra)
    occ = ds.occlusion
    occ = replace(occ, routing=m["routing"])
    model = build_variant(m["variant"], m["routing"], env=env, occlusion=occ, cfg=mcfg,
                          seed=int(t["seed"]))
    tcfg = TrainConfig(learning_steps=int(t["learning_steps"]), batch=int(t["batch"]),
                       lr=float(t["lr"]), gamma=float(t.get("gamma", env.gamma)),
                       checkpoint_every=int(t["checkpoint_every"]), seed=int(t["seed"]),
                       paper_scale=bool(args.paper_scale))
    os.makedirs(args.out_dir, exist_ok=True)
    # file name only: headers stay byte-identical across output locations
    meta = {"dataset": {"file": os.path.basename(ds_path), "sha256": _sha256(ds_path),
                        "meta": ds.meta}}
    res = train(model, ds, tcfg, out_dir=args.out_dir, meta=meta)
    cfg["model"]["resolved"] = mcfg.to_dict()
    cfg["train"]["resolved"] = tcfg.to_dict()
    write_manifest(args.out_dir, argv, cfg, int(t["seed"]), started)
    print(f"trained {tcfg.learning_steps} steps; {len(res.checkpoints)} checkpoints in {args.out_dir}")


def _checkpoint_paths(items):
    paths = []
    for item in items:
        if os.path.isdir(item):
            found = sorted(glob.glob(os.path.join(item, "ckpt_*.fbm")))
            if not found:
                raise ContractViolation(f"no checkpoints in {item}")
            paths += found
        elif os.path.exists(item):
            paths.append(item)
        else:
            raise ContractViolation(f"checkpoint not found: {item}")
    return paths


def _load_model(path, env):
    from . import autodiff as ad
    from .bfm import ModelConfig, build_variant
    from .envgen import OcclusionConfig

    manifest, arrays = ad.load_checkpoint(path)
    meta = manifest["meta"]
    mcfg = ModelConfig.from_dict(meta["model"])
    occ = OcclusionConfig(**meta["dataset"]["meta"]["occlusion"])
    model = build_variant(mcfg.variant, mcfg.routing, env=env, occlusion=occ, cfg=mcfg)
    model.load_arrays(arrays)
    return model, meta


def cmd_eval(args, argv, started):
    import numpy as np

    from .data import OfflineDataset
    from .envgen import DynamicsConfig, OcclusionConfig
    from .evalkit import evaluate_checkpoint, iqm, labelled_sets
    from .experiments import EVAL_FIELDS
    from .report import write_eval_csv

    paths = _checkpoint_paths(args.checkpoints)
    ds = OfflineDataset.load(_dataset_path(args.dataset))
    env = _env_from_meta(ds.meta)
    base_occ = ds.occlusion
    if args.occlusion is not None:
        base_occ = OcclusionConfig(args.occlusion, base_occ.sigma_noise, base_occ.p_flick)
    if args.normalize_z is not None:
        normalize = args.normalize_z == "on"
    else:
        normalize = None
    tasks = env.tasks
    if args.tasks:
        wanted = [t.strip() for t in args.tasks.split(",")]
        unknown = sorted(set(wanted) - {t.task_id for t in env.tasks})
        if unknown:
            raise ContractViolation(f"unknown tasks {unknown}")
        tasks = [t for t in env.tasks if t.task_id in wanted]
    scales = _scales(args.dynamics_scale) or [1.0]
    eval_seeds = [int(s) for s in str(args.seeds).split(",")]
    rows = []
    for path in paths:
        model, meta = _load_model(path, env)
        if normalize is not None:
            model.cfg.normalize_inferred_z = normalize
        train_seed = int(meta["train"]["seed"])
        labelled = labelled_sets(ds, tasks, args.labels_k, train_seed, model.L_backward,
                                 model.needs_states())
        occ = replace(base_occ, routing=model.cfg.routing)
        for scale in scales:
            pooled = {t.task_id: [] for t in tasks}
            for es in eval_seeds:
                scores = evaluate_checkpoint(model, env, tasks, labelled, args.rollouts,
                                             seed=10_000 + train_seed + 7919 * es, occlusion=occ,
                                             dynamics=DynamicsConfig.scaled(scale))
                for s in scores:
                    pooled[s.task] += [float(x) for x in s.returns]
            for task in tasks:
                ret = pooled[task.task_id]
                rows.append({"variant": model.cfg.variant, "routing": model.cfg.routing,
                             "env": env.name, "occlusion": occ.tag, "dynamics": f"{scale:g}",
                             "task": task.task_id, "seed": train_seed,
                             "checkpoint": int(meta["step"]), "score": iqm(ret),
                             "mean_return": float(np.mean(ret)), "returns": ret})
    os.makedirs(args.out, exist_ok=True)
    write_eval_csv(os.path.join(args.out, "eval.csv"), rows)
    resolved = {"checkpoints": paths, "dataset": _dataset_path(args.dataset),
                "occlusion": base_occ.tag, "dynamics_scales": scales, "rollouts": args.rollouts,
                "labels_k": args.labels_k, "eval_seeds": eval_seeds,
                "tasks": [t.task_id for t in tasks]}
    write_manifest(args.out, argv, resolved, eval_seeds[0], started)
    print(f"wrote {len(rows)} rows to {args.out}/eval.csv")


SWEEPS = ("failure", "memory", "dynamics", "occlusion", "context")


def cmd_sweep(args, argv, started):
    from . import experiments as ex
    from .report import write_eval_csv

    cfg = cfgmod.resolve(args.config, {
        "occlusion.mode": args.occlusion, "train.learning_steps": args.steps,
        "train.checkpoint_every": args.checkpoint_every, **_overrides(args.set)})
    t, o = cfg["train"], cfg["occlusion"]
    base = ex.RunSpec(env=cfg["env"]["name"], occlusion=o["mode"],
                      sigma_noise=float(o["sigma_noise"]), p_flick=float(o["p_flick"]),
                      episodes=int(cfg["data"]["episodes"]), data_seed=int(cfg["data"]["seed"]),
                      steps=int(t["learning_steps"]), batch=int(t["batch"]), lr=float(t["lr"]),
                      checkpoint_every=int(t["checkpoint_every"]),
                      context_length=int(cfg["model"].get("context_length", 8)),
                      rollouts=int(cfg["eval"]["rollouts"]), labels_k=int(cfg["eval"]["labels_k"]))
    seeds = range(int(args.seeds))
    common = dict(seeds=seeds, cache_dir=args.cache, use_cache=not args.no_cache)
    if args.kind == "failure":
        out = ex.failure_mode_suite(base, **common)
    elif args.kind == "memory":
        out = ex.memory_suite(base, **common)
    elif args.kind == "dynamics":
        res = ex.dynamics_split_suite(base, **common)
        out = {(s.label, s.scale): s for by in res.values() for s in by.values()}
    elif args.kind == "occlusion":
        out = ex.occlusion_sweep(base, **common)
    else:
        out = ex.context_sweep(base, **common)
    specs = sorted({replace(s.condition, seed=sd) for s in out.values() for sd in s.seeds},
                   key=lambda s: (s.label, s.seed))
    results = ex.run_all(specs, args.cache, use_cache=True)
    os.makedirs(args.out, exist_ok=True)
    write_eval_csv(os.path.join(args.out, "eval.csv"), ex.eval_rows(results))
    for (label, scale), s in sorted(out.items()):
        print(f"{label:45s} x{scale:g}  IQM {s.point:8.3f}  CI [{s.lo:.3f}, {s.hi:.3f}]  "
              f"norm {s.normalized:.3f}  step {s.step}")
    cfg["sweep"] = {"kind": args.kind, "seeds": list(seeds)}
    write_manifest(args.out, argv, cfg, 0, started)


def cmd_oracle_check(args, argv, started):
    import numpy as np

    from .data import OfflineDataset
    from .evalkit import (family_oracle_check, gridworld_mdp, gridworld_rewards, oracle_check,
                          state_distribution)

    if args.tabular:
        from .bfm import fit_tabular_fb_family
        from .envgen import GridWorld

        env = GridWorld()
        rho = np.full(env.n_states, 1.0 / env.n_states)
        rewards = gridworld_rewards(env, args.linear, args.seed)
        mdp = gridworld_mdp(env)
        fam = fit_tabular_fb_family(mdp.P, env.gamma, list(rewards.values()), rho, seed=args.seed)
        report = family_oracle_check(fam, env, rho, rewards)
        meta = {"step": None}
    else:
        if not args.checkpoint or not args.dataset:
            raise UsageError("oracle-check: --checkpoint and --dataset are required "
                             "unless --tabular is given")
        ds = OfflineDataset.load(_dataset_path(args.dataset))
        env = _env_from_meta(ds.meta)
        if env.name != "gridworld":
            raise ContractViolation("oracle-check needs a gridworld dataset and checkpoint")
        model, meta = _load_model(_checkpoint_paths([args.checkpoint])[-1], env)
        rho = state_distribution(ds, env.n_states)
        rewards = gridworld_rewards(env, args.linear, args.seed)
        report = oracle_check(model, env, rho, rewards)
    os.makedirs(args.out, exist_ok=True)
    rows = [{"task": k, "argmax_agreement": v["agreement"], "mae": v["mae"]}
            for k, v in report.items()]
    with open(os.path.join(args.out, "oracle_check.json"), "w") as fh:
        json.dump({"checkpoint_step": meta["step"], "tasks": rows,
                   "mean_agreement": float(np.mean([r["argmax_agreement"] for r in rows])),
                   "mean_mae": float(np.mean([r["mae"] for r in rows]))}, fh, indent=2)
    for r in rows:
        print(f"{r['task']:10s} agreement {r['argmax_agreement']:.3f}  MAE {r['mae']:.4f}")
    write_manifest(args.out, argv, {"checkpoint": args.checkpoint, "dataset": args.dataset,
                                    "tabular": args.tabular, "linear": args.linear},
                   args.seed, started)


def cmd_report(args, argv, started):
    from .report import render

    out = args.out or os.path.join(args.run_dir, "report")
    paths = render(args.run_dir, out)
    write_manifest(out, argv, {"run_dir": args.run_dir}, None, started)
    for p in paths:
        print(p)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fbm-lab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="roll out the behaviour policy into a dataset")
    g.add_argument("--config")
    g.add_argument("--env", choices=("gridworld", "point_mass"))
    g.add_argument("--occlusion", choices=("none", "noisy", "flickering", "hidden_velocity"))
    g.add_argument("--sigma-noise", type=float)
    g.add_argument("--p-flick", type=float)
    g.add_argument("--dynamics-scale", nargs="+", help="one or more mass/damping scales")
    g.add_argument("--episodes", type=int)
    g.add_argument("--behaviour", choices=("ou_explore", "uniform_random"))
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config")
    t.add_argument("--variant", choices=("fb", "fb_m", "fb_stack", "usf_m", "usf"))
    t.add_argument("--routing", choices=("all", "backward_only", "forward_policy_only", "none"))
    t.add_argument("--dataset", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--context-length", type=int)
    t.add_argument("--paper-scale", action="store_true")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score checkpoints with zero-shot rollouts")
    e.add_argument("--checkpoints", "--checkpoint", nargs="+", required=True,
                   help="checkpoint files or training directories")
    e.add_argument("--dataset", required=True, help="dataset used for labelled sets")
    e.add_argument("--env", help="ignored unless it disagrees with the dataset")
    e.add_argument("--occlusion", choices=("none", "noisy", "flickering", "hidden_velocity"))
    e.add_argument("--dynamics-scale", nargs="+")
    e.add_argument("--tasks", help="comma-separated task ids (default: all)")
    e.add_argument("--rollouts", type=int, default=10)
    e.add_argument("--seeds", default="0", help="comma-separated evaluation seeds")
    e.add_argument("--labels-k", type=int, default=1000)
    e.add_argument("--normalize-z", choices=("on", "off"))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a seeded experiment grid through the cache")
    s.add_argument("--kind", choices=SWEEPS, required=True)
    s.add_argument("--config")
    s.add_argument("--occlusion", choices=("none", "noisy", "flickering", "hidden_velocity"))
    s.add_argument("--seeds", type=int, default=5)
    s.add_argument("--steps", type=int)
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--cache")
    s.add_argument("--no-cache", action="store_true")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    o = sub.add_parser("oracle-check", help="compare a gridworld checkpoint with exact oracles")
    o.add_argument("--checkpoint")
    o.add_argument("--dataset")
    o.add_argument("--tabular", action="store_true",
                   help="fit a converged tabular FB family instead of loading a checkpoint")
    o.add_argument("--linear", type=int, default=5, help="number of random linear rewards")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle_check)

    r = sub.add_parser("report", help="render CSV tables and SVG plots")
    r.add_argument("--run-dir", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    p.commands = dict(sub.choices)
    return p


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            target = parser.commands.get(getattr(args, "command", None), parser)
            target.error(f"unrecognized arguments: {' '.join(extra)}")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, argv, time.time())
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (ContractViolation, OSError) as exc:
        print(f"fbm-lab: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
