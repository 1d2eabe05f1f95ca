"""Experiment config files: ``[section]`` headers with ``key = value`` lines.

Values use the TOML scalar syntax (quoted strings, numbers, ``true`` /
``false``, bracketed lists), so simple configs are valid TOML too.  Keys
are addressed as ``section.key`` (``occlusion.mode``, ``dynamics.mass_scale``).
"""
from __future__ import annotations

import ast
import configparser
import copy
import json

from .autodiff import ContractViolation

DEFAULTS = {
    "env": {"name": "point_mass", "size": 7, "episode_length": 200, "init": "uniform"},
    "occlusion": {"mode": "none", "sigma_noise": 0.2, "p_flick": 0.2, "routing": "all"},
    "dynamics": {"mass_scale": 1.0, "damping_scale": 1.0},
    "data": {"episodes": 100, "behaviour": "ou_explore", "seed": 0},
    "model": {"variant": "fb", "routing": "all", "d": 16, "context_length": 8},
    "train": {"learning_steps": 4000, "batch": 128, "lr": 1e-4, "gamma": 0.98,
              "checkpoint_every": 2000, "seed": 0},
    "eval": {"rollouts": 10, "labels_k": 1000, "seeds": 5},
}


def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text  # bare words are strings


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v) if not isinstance(v, (list, tuple)) else json.dumps(list(v))


def loads(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ContractViolation(f"bad config: {exc}") from None
    return {s: {k: parse_value(v) for k, v in cp.items(s)} for s in cp.sections()}


def load(path) -> dict:
    with open(path) as fh:
        return loads(fh.read())


def dumps(cfg: dict) -> str:
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        for k in sorted(cfg[section]):
            lines.append(f"{k} = {format_value(cfg[section][k])}")
        lines.append("")
    return "\n".join(lines)


def set_key(cfg: dict, dotted: str, value) -> None:
    if "." not in dotted:
        raise ContractViolation(f"config key {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    cfg.setdefault(section, {})[key] = value


def get_key(cfg: dict, dotted: str, default=None):
    section, key = dotted.split(".", 1)
    return cfg.get(section, {}).get(key, default)


def resolve(path=None, overrides: dict | None = None, base: dict | None = None) -> dict:
    """Defaults, then the file, then flag overrides (later wins)."""
    cfg = copy.deepcopy(DEFAULTS if base is None else base)
    if path is not None:
        for section, items in load(path).items():
            cfg.setdefault(section, {}).update(items)
    for dotted, value in (overrides or {}).items():
        if value is not None:
            set_key(cfg, dotted, value)
    return cfg
