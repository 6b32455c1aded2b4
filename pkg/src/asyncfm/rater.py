"""Per-token confidence rater, regeneration masks, and its training targets."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from .errors import InvalidArgument, InvalidState
from .layers import Block, init_module, normal

ALPHA = 0.01
BETA = 0.98
EPSILON = 1e-6
THRESHOLD = 0.5


@dataclass
class RaterConfig:
    layers: int = 4
    heads: int = 4
    ffn: int = 512
    d_r: int = 128
    T: float = THRESHOLD

    def validate(self) -> None:
        for name in ("layers", "heads", "ffn", "d_r"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"rater.{name} must be positive")
        if self.d_r % self.heads:
            raise InvalidArgument(f"rater.d_r={self.d_r} not divisible by heads={self.heads}")
        if not 0.0 < self.T < 1.0:
            raise InvalidArgument(f"rater.T must lie in (0, 1), got {self.T}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PseudoLabels:
    q: Tensor
    alpha: float = ALPHA
    beta: float = BETA
    epsilon: float = EPSILON


def per_token_error(sfm_actions: Tensor, gt_actions: Tensor) -> Tensor:
    """Mean over action dims of the squared error at each token."""
    if sfm_actions.shape != gt_actions.shape:
        raise InvalidArgument(
            f"shape mismatch: {tuple(sfm_actions.shape)} vs {tuple(gt_actions.shape)}"
        )
    return ((sfm_actions - gt_actions) ** 2).mean(-1)


def pseudo_labels(e: Tensor, alpha: float = ALPHA, beta: float = BETA,
                  epsilon: float = EPSILON) -> PseudoLabels:
    """Min-max map of per-token errors onto ``[1-alpha-beta, 1-alpha]``.

    The lowest-error token of each chunk gets ``1 - alpha``; larger errors map
    monotonically lower. Operates over the last axis.
    """
    if epsilon <= 0:
        raise InvalidArgument("epsilon must be positive")
    lo = e.min(-1, keepdim=True).values
    hi = e.max(-1, keepdim=True).values
    q = 1.0 - alpha - beta * (e - lo) / (hi - lo + epsilon)
    return PseudoLabels(q, alpha, beta, epsilon)


def build_mask(p: Tensor, T: float = THRESHOLD) -> Tensor:
    """Regenerate exactly the tokens whose confidence is strictly below ``T``."""
    if not 0.0 < T < 1.0:
        raise InvalidArgument(f"threshold must lie in (0, 1), got {T}")
    return (p < T).to(torch.int64)


def rater_loss(p: Tensor, q) -> Tensor:
    target = q.q if isinstance(q, PseudoLabels) else q
    if p.shape != target.shape:
        raise InvalidArgument("confidence / label length mismatch")
    return ((p - target) ** 2).mean()


class ConfidenceRater(nn.Module):
    """Transformer over ``[context embeddings, projected actions]`` with a sigmoid rate head.

    Context embeddings come from the backbone's input layer. When the rater
    width differs from the backbone width they pass through a linear map.
    """

    def __init__(self, config: RaterConfig, d_ctx: int, ctx_len: int, L: int, D: int):
        super().__init__()
        config.validate()
        self.config = config
        self.geometry = {"d_ctx": d_ctx, "ctx_len": ctx_len, "L": L, "D": D}
        d = config.d_r
        self.ctx_proj = nn.Linear(d_ctx, d) if d_ctx != d else None
        self.action_proj = nn.Linear(D, d)
        self.pos = nn.Parameter(torch.zeros(ctx_len + L, d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.ffn) for _ in range(config.layers))
        self.ln_f = nn.LayerNorm(d)
        self.rate_head = nn.Linear(d, 1)
        self.ready = False

    def logits(self, ctx_embeddings: Tensor, sfm_actions: Tensor) -> Tensor:
        g = self.geometry
        if ctx_embeddings.dim() == 2:
            ctx_embeddings = ctx_embeddings.unsqueeze(0)
        if sfm_actions.dim() == 2:
            sfm_actions = sfm_actions.unsqueeze(0)
        if ctx_embeddings.shape[1:] != (g["ctx_len"], g["d_ctx"]):
            raise InvalidArgument(f"context embeddings shape {tuple(ctx_embeddings.shape)} unexpected")
        if sfm_actions.shape[1:] != (g["L"], g["D"]):
            raise InvalidArgument(f"action chunk shape {tuple(sfm_actions.shape)} unexpected")
        c = ctx_embeddings.to(self.pos.dtype)
        if self.ctx_proj is not None:
            c = self.ctx_proj(c)
        x = torch.cat([c, self.action_proj(sfm_actions.to(self.pos.dtype))], dim=1) + self.pos
        for block in self.blocks:
            x = block(x)
        return self.rate_head(self.ln_f(x[:, g["ctx_len"] :])).squeeze(-1)

    def forward(self, ctx_embeddings: Tensor, sfm_actions: Tensor) -> Tensor:
        return torch.sigmoid(self.logits(ctx_embeddings, sfm_actions))

    def score(self, ctx_embeddings: Tensor, sfm_actions: Tensor) -> Tensor:
        """Confidence in (0, 1) per action token; requires trained or loaded weights."""
        if not self.ready:
            raise InvalidState("confidence rater has no trained parameters")
        return self.forward(ctx_embeddings, sfm_actions)


def init_rater(gen: np.random.Generator, config: RaterConfig, d_ctx: int, ctx_len: int,
               L: int, D: int, dtype: torch.dtype = torch.float32) -> ConfidenceRater:
    rater = ConfidenceRater(config, d_ctx, ctx_len, L, D).to(torch.float64)
    init_module(rater, gen)
    with torch.no_grad():
        rater.pos.copy_(normal(gen, rater.pos.shape, 0.02))
    return rater.to(dtype)
