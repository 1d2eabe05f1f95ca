"""Actor-critic training loop for FB / FB-M / FB-stack / USF models."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, ContractViolation
from .bfm import UsfModel, fb_td_loss, policy_loss, sample_z, usf_td_loss
from .data import OfflineDataset, sample_slices

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "critic_loss", "td", "diag", "orth", "actor_loss",
                 "critic_grad_norm", "actor_grad_norm")


class TrainingDiverged(ContractViolation):
    pass


@dataclass
class TrainConfig:
    learning_steps: int = 30_000
    batch: int = 128
    lr: float = 1e-4
    gamma: float = 0.98
    polyak: float = 0.01
    smoothing_std: float = 0.2
    smoothing_clip: float = 0.3
    z_mix: float = 0.5
    checkpoint_every: int = 2_000
    metrics_every: int = 100
    seed: int = 0
    paper_scale: bool = False

    def __post_init__(self):
        if not 0.0 < self.polyak <= 1.0:
            raise ContractViolation("polyak coefficient must lie in (0, 1]")
        if self.smoothing_std < 0 or self.smoothing_clip <= 0:
            raise ContractViolation("smoothing std must be >= 0 and clip > 0")
        if self.paper_scale:
            self.learning_steps = 1_000_000
            self.batch = 512
            self.checkpoint_every = 20_000

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainResult:
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)  # (step, arrays or path)


def polyak_update(targets, online, tau):
    """``target <- (1 - tau) target + tau online`` for matching parameter lists."""
    targets, online = list(targets), list(online)
    if len(targets) != len(online):
        raise ContractViolation("target and online parameter trees differ")
    for t, o in zip(targets, online):
        if t.shape != o.shape:
            raise ContractViolation(f"polyak shape mismatch {t.shape} vs {o.shape}")
        t.data = (1.0 - tau) * t.data + tau * o.data
    return targets


def _grad_norm(grads, params):
    return float(np.sqrt(sum(float((grads[p] ** 2).sum()) for p in params if p in grads)))


def _prior_backward(model, batch):
    """B outputs of the batch's future windows, on the sqrt(d) sphere."""
    view = model.backward_view(batch)
    with ad.no_tape():
        out = model.B(view.tau_future).data
    if isinstance(model, UsfModel):
        out = np.sqrt(model.d) * out / np.maximum(np.linalg.norm(out, axis=1, keepdims=True), 1e-12)
    return out


def train_step(model, dataset, cfg: TrainConfig, rng, critic_opt, actor_opt):
    batch = sample_slices(dataset, cfg.batch, model.L_forward, model.L_backward, rng,
                          include_states=model.needs_states())
    prior = _prior_backward(model, batch)
    z = sample_z(rng, cfg.batch, model.d, prior, cfg.z_mix)
    smoothing = (cfg.smoothing_std, cfg.smoothing_clip)
    lossfn = usf_td_loss if isinstance(model, UsfModel) else fb_td_loss
    with ad.Tape() as tape:
        loss, parts = lossfn(model, batch, z, rng=rng, smoothing=smoothing)
    if not np.isfinite(loss.data):
        raise TrainingDiverged(f"critic loss became non-finite: {parts}")
    grads = tape.backward(loss)
    critic_opt.step(grads)
    row = {"critic_loss": float(loss.data), **parts,
           "critic_grad_norm": _grad_norm(grads, critic_opt.params),
           "actor_loss": float("nan"), "actor_grad_norm": float("nan")}
    if actor_opt is not None:
        z2 = sample_z(rng, cfg.batch, model.d, prior, cfg.z_mix)
        with ad.Tape() as tape:
            ploss = policy_loss(model, batch, z2)
        if not np.isfinite(ploss.data):
            raise TrainingDiverged("actor loss became non-finite")
        agrads = tape.backward(ploss)
        actor_opt.step(agrads)
        row["actor_loss"] = float(ploss.data)
        row["actor_grad_norm"] = _grad_norm(agrads, actor_opt.params)
    for tgt, src in model.targets():
        polyak_update([p for p in tgt.parameters()], [p for p in src.parameters()], cfg.polyak)
    return row


def train(model, dataset: OfflineDataset, cfg: TrainConfig, out_dir=None, callback=None,
          meta=None):
    """Train in place.  Checkpoints go to ``out_dir`` when given, else stay in memory.

    ``meta`` is merged into every checkpoint header.
    """
    if dataset.meta.get("action_kind", "continuous") != ("discrete" if model.discrete else "continuous"):
        raise ContractViolation("dataset action space does not match the model")
    if model.needs_states() is False and dataset.obs_dim != model.f_in:
        raise ContractViolation("dataset observation width does not match the model")
    model.cfg.gamma = cfg.gamma
    rng = np.random.default_rng(cfg.seed)
    critic_params = [p for p in model.critic_parameters() if p.trainable]
    critic_opt = Adam(critic_params, lr=cfg.lr)
    actor_opt = None if model.discrete else Adam(model.actor_parameters(), lr=cfg.lr)
    result = TrainResult()
    writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    try:
        for step in range(1, cfg.learning_steps + 1):
            row = train_step(model, dataset, cfg, rng, critic_opt, actor_opt)
            if step % cfg.metrics_every == 0 or step == cfg.learning_steps:
                row = {"step": step, **{k: row.get(k, float("nan")) for k in METRIC_FIELDS if k != "step"}}
                result.metrics.append(row)
                if writer is not None:
                    writer.writerow({k: (f"{v:.17g}" if isinstance(v, float) else v)
                                     for k, v in row.items()})
                log.debug("step %d critic %.4f actor %.4f", step, row["critic_loss"], row["actor_loss"])
            if step % cfg.checkpoint_every == 0 or step == cfg.learning_steps:
                if any(c[0] == step for c in result.checkpoints):
                    continue
                if out_dir is not None:
                    path = os.path.join(out_dir, f"ckpt_{step:07d}.fbm")
                    ad.save_checkpoint(path, model.parameters(),
                                       {**(meta or {}), "step": step,
                                        "model": model.cfg.to_dict(), "train": cfg.to_dict()})
                    result.checkpoints.append((step, path))
                else:
                    result.checkpoints.append((step, model.state_arrays()))
                if callback is not None:
                    callback(step, model)
    finally:
        if writer is not None:
            fh.close()
    return result
