"""Two-round action generation: synchronous pass, confidence scoring, selective regeneration."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor

from . import flow
from .backbone import ContextBundle, ContextCache, VelocityModel
from .errors import InvalidArgument, InvalidState, StaleCacheError
from .rater import ConfidenceRater, build_mask
from .rng import RngStreams

log = logging.getLogger(__name__)

MODES = ("sfm-only", "async", "random-mask")


@dataclass
class Diagnostics:
    mode: str
    sfm_actions: np.ndarray
    confidence: np.ndarray | None = None
    mask: np.ndarray | None = None
    rater_called: bool = False
    afm_rounds: int = 0
    cache_builds: int = 0
    timings: dict[str, float] = field(default_factory=lambda: {"sfm": 0.0, "rater": 0.0, "afm": 0.0})

    def to_dict(self) -> dict:
        def arr(x):
            return None if x is None else np.asarray(x).tolist()

        return {
            "mode": self.mode,
            "sfm_actions": arr(self.sfm_actions),
            "confidence": arr(self.confidence),
            "mask": arr(self.mask),
            "rater_called": self.rater_called,
            "afm_rounds": self.afm_rounds,
            "cache_builds": self.cache_builds,
            "timings": dict(self.timings),
        }


def ensure_cache(model: VelocityModel, ctx: ContextBundle, cache: ContextCache | None,
                 diag: Diagnostics | None = None) -> ContextCache:
    """Return a cache valid for ``ctx``; rebuilds (with a warning) a stale one."""
    if cache is not None:
        if cache.fingerprint == ctx.fingerprint() and cache.param_version == model.param_version:
            return cache
        log.warning("context cache is stale for this episode; rebuilding")
    cache = model.build_ctx_cache(ctx)
    if diag is not None:
        diag.cache_builds += 1
    return cache


@torch.no_grad()
def sfm_generate(model: VelocityModel, ctx: ContextBundle, rng: np.random.Generator,
                 steps: int = flow.DEFAULT_STEPS, cache: ContextCache | None = None) -> Tensor:
    """First-round chunk(s): every token integrated from noise on one shared schedule."""
    c = model.config
    ctx = ctx.as_batch()
    B = ctx.state_tokens.shape[0]
    dtype = model.pos.dtype
    if cache is None:
        cache = model.build_ctx_cache(ctx)
    ones = torch.ones(B, c.L, dtype=torch.int64)
    init = torch.from_numpy(rng.standard_normal((B, c.L, c.D))).to(dtype)
    return flow.integrate(lambda s, tau: model.velocity(ctx, s, tau, ones, cache), init, ones, steps)


@torch.no_grad()
def afm_regenerate(model: VelocityModel, ctx: ContextBundle, actions: Tensor, mask: Tensor,
                   rng: np.random.Generator, steps: int = flow.DEFAULT_STEPS,
                   cache: ContextCache | None = None) -> Tensor:
    """Regenerate masked tokens from fresh noise, holding unmasked tokens fixed."""
    ctx = ctx.as_batch()
    if actions.dim() == 2:
        actions, mask = actions.unsqueeze(0), mask.reshape(1, -1)
    mask = mask.to(torch.int64)
    if not bool(mask.any()):
        return actions.clone()
    if cache is None:
        cache = model.build_ctx_cache(ctx)
    init = flow.async_init(actions, mask, rng)
    return flow.integrate(lambda s, tau: model.velocity(ctx, s, tau, mask, cache), init, mask, steps)


def _tick() -> float:
    return time.perf_counter()


@torch.no_grad()
def infer(
    ctx: ContextBundle,
    backbone: VelocityModel,
    rater: ConfidenceRater | None,
    mode: str,
    streams: RngStreams,
    *,
    T: float | None = None,
    steps: int = flow.DEFAULT_STEPS,
    afm_repeats: int = 1,
    cache: ContextCache | None = None,
    mask_override: Tensor | None = None,
) -> tuple[Tensor, Diagnostics]:
    """Batched episode inference; returns ``(B, L, D)`` actions and diagnostics.

    ``mask_override`` supplies the regeneration mask directly (used for oracle
    evaluations) and bypasses both the rater and random masking.
    """
    if mode not in MODES:
        raise InvalidArgument(f"unknown inference mode {mode!r}; expected one of {MODES}")
    ctx = ctx.as_batch()
    c = backbone.config
    B = ctx.state_tokens.shape[0]

    t0 = _tick()
    diag = Diagnostics(mode=mode, sfm_actions=np.empty(0))
    cache = ensure_cache(backbone, ctx, cache, diag)
    actions = sfm_generate(backbone, ctx, streams["noise"], steps, cache)
    diag.timings["sfm"] = _tick() - t0
    diag.sfm_actions = actions.cpu().numpy()
    if mode == "sfm-only" and mask_override is None:
        return actions, diag

    t0 = _tick()
    if mask_override is not None:
        mask = mask_override.reshape(B, c.L).to(torch.int64)
    elif mode == "random-mask":
        mask = torch.from_numpy((streams["mask"].random((B, c.L)) < 0.5).astype(np.int64))
    else:
        if rater is None:
            raise InvalidState("async mode requires a confidence rater")
        thr = rater.config.T if T is None else T
        p = rater.score(backbone.context_embeddings(ctx), actions)
        diag.confidence = p.cpu().numpy()
        diag.rater_called = True
        mask = build_mask(p, thr)
    diag.timings["rater"] = _tick() - t0
    diag.mask = mask.cpu().numpy()

    t0 = _tick()
    for _ in range(afm_repeats):
        if not bool(mask.any()):
            break
        actions = afm_regenerate(backbone, ctx, actions, mask, streams["noise"], steps, cache)
        diag.afm_rounds += 1
    diag.timings["afm"] = _tick() - t0
    return actions, diag


def infer_episode(ctx: ContextBundle, backbone: VelocityModel, rater: ConfidenceRater | None,
                  mode: str, streams: RngStreams, **kwargs) -> tuple[Tensor, Diagnostics]:
    """Single-episode inference returning an ``(L, D)`` chunk."""
    if ctx.batched and ctx.state_tokens.shape[0] != 1:
        raise InvalidArgument("infer_episode takes one context; use infer() for batches")
    actions, diag = infer(ctx, backbone, rater, mode, streams, **kwargs)
    return actions[0], diag


__all__ = [
    "Diagnostics", "MODES", "afm_regenerate", "ensure_cache", "infer", "infer_episode",
    "sfm_generate", "StaleCacheError",
]
