"""Tables (CSV) and plots (SVG) from an evaluation run directory.

The run directory must hold ``eval.csv`` with one row per (variant,
routing, env, occlusion, dynamics, task, seed, checkpoint), as written by
the ``eval`` and ``sweep`` commands.
"""
from __future__ import annotations

import csv
import os
from collections import defaultdict

import numpy as np

from .autodiff import ContractViolation
from .evalkit import aggregate_score, bootstrap_aggregate_ci, iqm, select_checkpoint
from .experiments import EVAL_FIELDS

REQUIRED = ("eval.csv",)
COND_KEYS = ("variant", "routing", "env", "occlusion", "dynamics")


def read_eval_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["seed"] = int(r["seed"])
        r["checkpoint"] = int(r["checkpoint"])
        r["score"] = float(r["score"])
        r["returns"] = [float(x) for x in r["returns"].split()]
    return rows


def write_eval_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
        w.writeheader()
        for r in rows:
            r = dict(r)
            if isinstance(r["returns"], (list, tuple, np.ndarray)):
                r["returns"] = " ".join(f"{x:.17g}" for x in r["returns"])
            r["score"] = f"{float(r['score']):.17g}"
            r["mean_return"] = f"{float(r['mean_return']):.17g}"
            w.writerow(r)


def _is_baseline(cond: dict) -> bool:
    return cond["variant"] == "fb" and (cond["routing"] == "none" or cond["occlusion"] == "none")


def condition_summaries(rows, resamples=1000) -> list[dict]:
    """Checkpoint selection, all-task IQM and its CI for every condition."""
    groups = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in COND_KEYS)].append(r)
    out = []
    for key in sorted(groups):
        grp = groups[key]
        by_step = defaultdict(lambda: defaultdict(list))
        for r in grp:
            by_step[r["checkpoint"]][r["seed"]].append(r["score"])
        scores = {st: [iqm(v) for _, v in sorted(seeds.items())] for st, seeds in by_step.items()}
        best = select_checkpoint(scores)
        chosen = [r for r in grp if r["checkpoint"] == best]
        cells = [np.asarray(r["returns"]) for r in chosen]
        lo, hi = bootstrap_aggregate_ci(cells, resamples, rng=np.random.default_rng(0))
        per_task = defaultdict(list)
        for r in sorted(chosen, key=lambda r: r["seed"]):
            per_task[r["task"]].append(r["score"])
        out.append({**dict(zip(COND_KEYS, key)), "checkpoint": best,
                    "iqm": aggregate_score(cells), "ci_lo": lo, "ci_hi": hi,
                    "seeds": len({r["seed"] for r in chosen}), "per_task": dict(per_task)})
    # normalise against oracle-state FB in the same env and dynamics
    for s in out:
        base = [b for b in out if _is_baseline(b) and b["env"] == s["env"]
                and b["dynamics"] == s["dynamics"]
                and (b["occlusion"] == s["occlusion"] or b["occlusion"] == "none")]
        base.sort(key=lambda b: b["occlusion"] != s["occlusion"])
        s["baseline"] = "/".join(base[0][k] for k in COND_KEYS) if base else ""
        s["normalized"] = s["iqm"] / base[0]["iqm"] if base and base[0]["iqm"] else float("nan")
    return out


def _fmt(x) -> str:
    return f"{x:.6g}"


def render(run_dir, out_dir=None, resamples=1000) -> list[str]:
    """Write summary/task tables and SVG plots; returns the written paths."""
    missing = [f for f in REQUIRED if not os.path.exists(os.path.join(run_dir, f))]
    if missing:
        raise ContractViolation(
            f"{run_dir}: missing expected files: {', '.join(missing)} "
            "(run `fbm-lab eval` or `fbm-lab sweep` first)")
    rows = read_eval_csv(os.path.join(run_dir, "eval.csv"))
    if not rows:
        raise ContractViolation(f"{run_dir}/eval.csv has no rows")
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    summ = condition_summaries(rows, resamples)
    written = []

    path = os.path.join(out_dir, "summary.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(COND_KEYS) + ["checkpoint", "seeds", "iqm", "ci_lo", "ci_hi",
                                      "normalized", "baseline"])
        for s in summ:
            w.writerow([s[k] for k in COND_KEYS] + [s["checkpoint"], s["seeds"], _fmt(s["iqm"]),
                                                    _fmt(s["ci_lo"]), _fmt(s["ci_hi"]),
                                                    _fmt(s["normalized"]), s["baseline"]])
    written.append(path)

    path = os.path.join(out_dir, "tasks.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(COND_KEYS) + ["task", "mean", "std", "mean_pm_std", "normalized"])
        for s in summ:
            base = next((b for b in summ if "/".join(b[k] for k in COND_KEYS) == s["baseline"]), None)
            for task, vals in sorted(s["per_task"].items()):
                m, sd = float(np.mean(vals)), float(np.std(vals))
                bm = float(np.mean(base["per_task"].get(task, [np.nan]))) if base else np.nan
                norm = m / bm if bm else float("nan")
                w.writerow([s[k] for k in COND_KEYS] + [task, _fmt(m), _fmt(sd),
                                                        f"{m:.3g} ± {sd:.2g}", _fmt(norm)])
    written.append(path)

    written.append(plot_summary(summ, os.path.join(out_dir, "summary.svg")))
    written.append(plot_tasks(summ, os.path.join(out_dir, "tasks.svg")))
    return written


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "fbm-lab"  # stable element ids
    import matplotlib.pyplot as plt

    return plt


def _label(s) -> str:
    return f"{s['variant']}/{s['routing']}\n{s['occlusion']} x{s['dynamics']}"


def plot_summary(summ, path) -> str:
    """Bar chart of normalised all-task IQM with bootstrap CI whiskers."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(summ)), 3.6))
    x = np.arange(len(summ))
    norm = np.array([s["normalized"] for s in summ])
    use_norm = np.all(np.isfinite(norm))
    if use_norm:
        scale = np.array([s["normalized"] / s["iqm"] if s["iqm"] else 0.0 for s in summ])
        y = norm
    else:
        scale = np.ones(len(summ))
        y = np.array([s["iqm"] for s in summ])
    lo = np.array([s["ci_lo"] for s in summ]) * scale
    hi = np.array([s["ci_hi"] for s in summ]) * scale
    ax.bar(x, y, color="#4c72b0")
    ax.errorbar(x, y, yerr=np.vstack([np.maximum(y - lo, 0), np.maximum(hi - y, 0)]), fmt="none",
                ecolor="black", capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels([_label(s) for s in summ], fontsize=7)
    ax.set_ylabel("normalised IQM" if use_norm else "all-task IQM")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_tasks(summ, path) -> str:
    """Per-task mean score (± std over seeds) for each condition."""
    plt = _pyplot()
    tasks = sorted({t for s in summ for t in s["per_task"]})
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(tasks) * max(1, len(summ)) / 2), 3.6))
    width = 0.8 / max(1, len(summ))
    x = np.arange(len(tasks))
    for i, s in enumerate(summ):
        m = [float(np.mean(s["per_task"].get(t, [np.nan]))) for t in tasks]
        sd = [float(np.std(s["per_task"].get(t, [np.nan]))) for t in tasks]
        ax.bar(x + i * width, m, width, yerr=sd, capsize=2, label=_label(s).replace("\n", " "))
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(tasks, fontsize=7, rotation=30)
    ax.set_ylabel("task score")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
