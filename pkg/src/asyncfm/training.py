"""Unified masked flow-matching training and confidence-rater training."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import flow
from .backbone import BackboneConfig, ContextBundle, VelocityModel, init_params, param_digest
from .bench import Dataset
from .checkpoint import Checkpoint, save_checkpoint
from .errors import InvalidArgument, InvalidState, NumericError
from .inference import sfm_generate
from .rater import RaterConfig, init_rater, per_token_error, pseudo_labels, rater_loss
from .rng import RngStreams

log = logging.getLogger(__name__)

MASK_MODES = ("bernoulli", "all-one", "all-zero")
HEAD_MODULES = ("action_proj", "embed_fc1", "embed_fc2", "head")


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr_backbone: float = 1e-3
    lr_head: float = 1e-3
    epochs: int = 60
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    schedule: str = "constant"
    mask_mode: str = "bernoulli"
    context_source: str = "gt"
    steps: int = flow.DEFAULT_STEPS
    afm_repeats: int = 1
    eval_size: int = 256
    checkpoint_every: int = 0
    rater_epochs: int = 20
    rater_lr: float = 1e-3
    rater_rollouts: int = 4
    rater_corrupt_prob: float = 0.5
    rater_corrupt_scale: float = 1.0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.rater_epochs < 0:
            raise InvalidArgument("batch_size must be >= 1 and epoch counts >= 0")
        if min(self.lr_backbone, self.lr_head, self.rater_lr) <= 0:
            raise InvalidArgument("learning rates must be positive")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidArgument(f"unknown schedule {self.schedule!r}")
        if self.mask_mode not in MASK_MODES:
            raise InvalidArgument(f"unknown mask_mode {self.mask_mode!r}")
        if self.context_source not in ("gt", "sfm"):
            raise InvalidArgument(f"unknown context_source {self.context_source!r}")
        if self.steps < 1 or self.afm_repeats < 0 or self.rater_rollouts < 1:
            raise InvalidArgument("steps and rater_rollouts must be >= 1, afm_repeats >= 0")
        if not 0.0 <= self.rater_corrupt_prob <= 1.0:
            raise InvalidArgument("rater_corrupt_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def make_optimizer(model: VelocityModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    head, body = [], []
    for name, p in model.named_parameters():
        (head if name.split(".")[0] in HEAD_MODULES else body).append(p)
    groups = [{"params": body, "lr": cfg.lr_backbone}, {"params": head, "lr": cfg.lr_head}]
    return torch.optim.AdamW(groups, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def draw_masks(streams: RngStreams, B: int, L: int, mode: str) -> torch.Tensor:
    if mode == "bernoulli":
        return torch.from_numpy(flow.sample_mask(streams["mask"], L, size=B))
    fill = 1 if mode == "all-one" else 0
    return torch.full((B, L), fill, dtype=torch.int64)


def train_step(
    model: VelocityModel,
    optimizer: torch.optim.Optimizer | None,
    ctx: ContextBundle,
    actions: torch.Tensor,
    streams: RngStreams,
    mask_mode: str = "bernoulli",
    context_source: str = "gt",
    steps: int = flow.DEFAULT_STEPS,
    trace: dict | None = None,
) -> float:
    """One unified update on a batch; returns the batch loss.

    Per sample: a token mask (rate ``y ~ U(0,1)``), a time ``tau ~ Beta(1.5,1)``
    and Gaussian noise, each from its own stream. A batch whose masks are all
    empty has loss 0 and leaves the parameters untouched.
    """
    if actions.shape[0] == 0:
        raise InvalidArgument("empty batch")
    B, L, D = actions.shape
    dtype = model.pos.dtype
    actions = actions.to(dtype)
    mask = draw_masks(streams, B, L, mask_mode)
    tau = torch.from_numpy(flow.sample_time(streams["time"], B)).to(dtype)
    noise = torch.from_numpy(streams["noise"].standard_normal((B, L, D))).to(dtype)

    clean = actions
    if context_source == "sfm":
        # condition unmasked tokens on the model's own first-round output
        model.eval()
        clean = sfm_generate(model, ctx, streams["noise"], steps)
        model.train()
    u = flow.gt_velocity(actions, noise)
    noisy = flow.interp_path(clean, noise, tau, mask)
    if context_source == "sfm":
        sel = mask.to(torch.bool).unsqueeze(-1)
        noisy = torch.where(sel, flow.interp_path(actions, noise, tau, mask), noisy)
    pred = model.velocity(ctx, noisy, tau, mask)
    loss = flow.masked_loss(pred, u, mask)
    if trace is not None:
        trace.update(mask=mask, tau=tau, noise=noise, noisy=noisy, u=u, pred=pred.detach())
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite training loss {loss.item()} (tau range [{tau.min():.3g}, {tau.max():.3g}], "
            f"masked tokens {int(mask.sum())}, max |pred| {pred.detach().abs().max():.3g})"
        )
    if optimizer is not None and bool(mask.any()):
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        model.mark_updated()
    return float(loss.detach())


@torch.no_grad()
def heldout_loss(model: VelocityModel, data: Dataset, seed: int, mask_mode: str = "bernoulli",
                 batch_size: int = 256) -> float:
    """Masked-velocity MSE on held-out data with draws fixed by ``seed``.

    Every call with the same seed sees the same masks, times and noise, so
    curves from different models or epochs are directly comparable.
    """
    streams = RngStreams(seed, names=("mask", "time", "noise"))
    dtype = model.pos.dtype
    total, n = 0.0, 0
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        ctx, a = data.batch(idx, dtype)
        B, L, D = a.shape
        mask = draw_masks(streams, B, L, mask_mode)
        tau = torch.from_numpy(flow.sample_time(streams["time"], B)).to(dtype)
        noise = torch.from_numpy(streams["noise"].standard_normal((B, L, D))).to(dtype)
        pred = model.velocity(ctx, flow.interp_path(a, noise, tau, mask), tau, mask)
        total += float(flow.masked_loss(pred, flow.gt_velocity(a, noise), mask)) * B
        n += B
    return total / n


def _lr_factor(cfg: TrainConfig, epoch: int, total: int) -> float:
    if cfg.schedule == "constant" or total <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * epoch / total))


def _set_lr(optimizer, base: list[float], factor: float) -> None:
    for group, lr in zip(optimizer.param_groups, base):
        group["lr"] = lr * factor


def train_backbone(
    dataset: Dataset,
    backbone_config: BackboneConfig,
    config: TrainConfig,
    *,
    val: Dataset | None = None,
    log_path=None,
    ckpt_dir=None,
    dtype: torch.dtype = torch.float32,
    on_epoch: Callable[[int, dict, torch.nn.Module], None] | None = None,
) -> Checkpoint:
    """Shuffled mini-batch epochs of ``train_step``; returns the final checkpoint."""
    config.validate()
    if len(dataset) == 0:
        raise InvalidArgument("training set is empty")
    streams = RngStreams(config.seed)
    model = init_params(streams["init"], backbone_config, dtype)
    model.train()
    opt = make_optimizer(model, config)
    base_lrs = [g["lr"] for g in opt.param_groups]
    history: dict[str, list] = {"train": [], "val": []}
    ckpt = Checkpoint(model, backbone_config, train_config=config.to_dict(), loss_history=history)
    for epoch in range(config.epochs):
        _set_lr(opt, base_lrs, _lr_factor(config, epoch, config.epochs))
        order = streams["data"].permutation(len(dataset))
        losses = []
        for start in range(0, len(order), config.batch_size):
            ctx, a = dataset.batch(order[start : start + config.batch_size], dtype)
            losses.append(train_step(model, opt, ctx, a, streams, config.mask_mode,
                                     config.context_source, config.steps))
        row = {"epoch": epoch, "train": float(np.mean(losses))}
        history["train"].append(row["train"])
        if val is not None and len(val):
            model.eval()
            row["val"] = heldout_loss(model, val.subset(np.arange(min(len(val), config.eval_size))),
                                      seed=config.seed + 7919, mask_mode="bernoulli")
            model.train()
            history["val"].append(row["val"])
        _log_epoch(log_path, row)
        log.info("epoch %d train %.6f%s", epoch, row["train"],
                 f" val {row['val']:.6f}" if "val" in row else "")
        if on_epoch is not None:
            on_epoch(epoch, row, model)
        ckpt.epoch = epoch + 1
        if ckpt_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
            ckpt.rng_state = streams.get_state()
            save_checkpoint(ckpt, Path(ckpt_dir) / f"backbone_epoch{epoch + 1:04d}.ckpt")
    model.eval()
    ckpt.rng_state = streams.get_state()
    return ckpt


def _log_epoch(log_path, row: dict) -> None:
    if log_path is None:
        return
    try:
        with open(log_path, "a") as f:
            for split in ("train", "val", "rater"):
                if split in row:
                    f.write(f"{row['epoch']}\t{split}\t{row[split]:.9g}\n")
    except OSError as exc:
        raise OSError(f"cannot append to training log {log_path}: {exc}") from exc


@torch.no_grad()
def sfm_rollouts(model: VelocityModel, dataset: Dataset, rng: np.random.Generator,
                 steps: int = flow.DEFAULT_STEPS, batch_size: int = 256) -> torch.Tensor:
    dtype = model.pos.dtype
    out = []
    for start in range(0, len(dataset), batch_size):
        ctx, _ = dataset.batch(np.arange(start, min(start + batch_size, len(dataset))), dtype)
        out.append(sfm_generate(model, ctx, rng, steps))
    return torch.cat(out)


def train_rater(
    dataset: Dataset,
    backbone_ckpt: Checkpoint | None,
    rater_config: RaterConfig,
    config: TrainConfig,
    *,
    log_path=None,
    on_epoch: Callable[[int, dict, torch.nn.Module], None] | None = None,
) -> Checkpoint:
    """Fit the confidence rater to pseudo-labels of a frozen backbone's first-round errors.

    First-round chunks come from ``rater_rollouts`` independent full-schedule
    generations per training episode (fresh noise each); epoch ``k`` uses
    rollout ``k mod rater_rollouts``. The backbone parameters are verified
    bit-identical afterwards.
    """
    config.validate()
    if backbone_ckpt is None or backbone_ckpt.backbone is None:
        raise InvalidState("rater training needs a trained backbone checkpoint")
    backbone = backbone_ckpt.backbone
    bcfg = backbone_ckpt.backbone_config
    before = param_digest(backbone)
    backbone.eval()
    flags = [p.requires_grad for p in backbone.parameters()]
    for p in backbone.parameters():
        p.requires_grad_(False)

    streams = RngStreams(config.seed + 1)
    dtype = backbone.pos.dtype
    rater = init_rater(streams["init"], rater_config, bcfg.d, bcfg.ctx_len, bcfg.L, bcfg.D, dtype)
    opt = torch.optim.AdamW(rater.parameters(), lr=config.rater_lr,
                            betas=(config.beta1, config.beta2), weight_decay=config.weight_decay)
    base_lrs = [g["lr"] for g in opt.param_groups]
    try:
        rollouts = [sfm_rollouts(backbone, dataset, streams["noise"], config.steps)
                    for _ in range(config.rater_rollouts)]
        with torch.no_grad():
            ctx_all, gt_all = dataset.batch(np.arange(len(dataset)), dtype)
            ctx_emb = backbone.context_embeddings(ctx_all)
        history = list(backbone_ckpt.loss_history.get("rater", []))
        rater.train()
        for epoch in range(config.rater_epochs):
            _set_lr(opt, base_lrs, _lr_factor(config, epoch, config.rater_epochs))
            sfm = rollouts[epoch % config.rater_rollouts]
            order = streams["data"].permutation(len(dataset))
            losses = []
            for start in range(0, len(order), config.batch_size):
                idx = torch.from_numpy(order[start : start + config.batch_size])
                acts = sfm[idx]
                if config.rater_corrupt_prob > 0:
                    acts = _augment(acts, config, streams["mask"])
                q = pseudo_labels(per_token_error(acts, gt_all[idx]))
                loss = rater_loss(rater(ctx_emb[idx], acts), q)
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite rater loss at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            row = {"epoch": epoch, "rater": float(np.mean(losses))}
            history.append(row["rater"])
            _log_epoch(log_path, row)
            log.info("rater epoch %d loss %.6f", epoch, row["rater"])
            if on_epoch is not None:
                on_epoch(epoch, row, rater)
    finally:
        for p, flag in zip(backbone.parameters(), flags):
            p.requires_grad_(flag)
    if param_digest(backbone) != before:
        raise InvalidState("backbone parameters changed during rater training")
    rater.eval()
    rater.ready = True
    hist = dict(backbone_ckpt.loss_history)
    hist["rater"] = history
    return Checkpoint(
        backbone=backbone,
        backbone_config=bcfg,
        rater=rater,
        rater_config=rater_config,
        train_config=config.to_dict(),
        rng_state={**backbone_ckpt.rng_state, **{f"rater.{k}": v for k, v in streams.get_state().items()}},
        epoch=backbone_ckpt.epoch,
        loss_history=hist,
        extras=dict(backbone_ckpt.extras),
    )


def _augment(acts: torch.Tensor, config: TrainConfig, rng: np.random.Generator) -> torch.Tensor:
    """Offset one random token in a random subset of first-round chunks."""
    B, L, D = acts.shape
    hit = rng.random(B) < config.rater_corrupt_prob
    tok = rng.integers(0, L, B)
    scale = config.rater_corrupt_scale * rng.random(B)
    offs = rng.standard_normal((B, D))
    out = acts.clone()
    for b in np.flatnonzero(hit):
        out[b, tok[b]] += torch.from_numpy(scale[b] * offs[b]).to(acts.dtype)
    return out
