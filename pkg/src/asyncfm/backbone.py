"""Velocity-field model over ``[task token, state tokens, action tokens]``.

Context positions attend only among themselves while action positions attend
to everything, so per-layer context keys/values do not depend on the actions
and can be computed once per episode and reused for every flow step.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import InvalidArgument, NumericError, StaleCacheError
from .layers import Block, init_linear, init_module, normal


@dataclass
class BackboneConfig:
    d: int = 128
    layers: int = 4
    heads: int = 4
    ffn: int = 512
    L: int = 8
    D: int = 4
    S: int = 8
    d_in: int = 4
    num_tasks: int = 4
    time_scale: float = 1000.0

    def validate(self) -> None:
        for name in ("d", "layers", "heads", "ffn", "L", "D", "S", "d_in", "num_tasks"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"backbone.{name} must be positive")
        if self.d % self.heads:
            raise InvalidArgument(f"backbone.d={self.d} not divisible by heads={self.heads}")
        if self.d % 2:
            raise InvalidArgument("backbone.d must be even for the sinusoidal embedding")

    @property
    def ctx_len(self) -> int:
        return self.S + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ContextBundle:
    """Synthetic observation tokens plus a task id; batched or single."""

    state_tokens: Tensor  # (S, d_in) or (B, S, d_in)
    task_id: Tensor  # () or (B,)

    @classmethod
    def single(cls, state_tokens, task_id: int) -> "ContextBundle":
        return cls(torch.as_tensor(np.asarray(state_tokens)), torch.tensor(int(task_id)))

    @property
    def batched(self) -> bool:
        return self.state_tokens.dim() == 3

    def as_batch(self) -> "ContextBundle":
        if self.batched:
            return self
        return ContextBundle(self.state_tokens.unsqueeze(0), self.task_id.reshape(1))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        st = self.state_tokens.detach().cpu().contiguous()
        h.update(str(tuple(st.shape)).encode())
        h.update(str(st.dtype).encode())
        h.update(st.numpy().tobytes())
        h.update(self.task_id.detach().cpu().to(torch.int64).numpy().tobytes())
        return h.hexdigest()


@dataclass
class ContextCache:
    keys: list[Tensor]
    values: list[Tensor]
    fingerprint: str
    param_version: int


def sinusoidal_embed(values: Tensor, d: int, scale: float = 1000.0) -> Tensor:
    """Interleaved sin/cos encoding of each scalar in ``values``.

    Output has shape ``values.shape + (d,)`` with entries
    ``[sin(x w_0), cos(x w_0), sin(x w_1), ...]`` where ``x = scale * value``
    and ``w_i = 10000 ** (-2i/d)``.
    """
    half = d // 2
    i = torch.arange(half, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * 2.0 * i / d).to(values.dtype)
    ang = (scale * values).unsqueeze(-1) * freqs
    return torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)


class VelocityModel(nn.Module):
    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = c = config
        self.task_embed = nn.Embedding(c.num_tasks, c.d)
        self.state_proj = nn.Linear(c.d_in, c.d)
        self.action_proj = nn.Linear(c.D, c.d)
        self.embed_fc1 = nn.Linear(2 * c.d, c.d)
        self.embed_fc2 = nn.Linear(c.d, c.d)
        self.pos = nn.Parameter(torch.zeros(c.ctx_len + c.L, c.d))
        self.blocks = nn.ModuleList(Block(c.d, c.heads, c.ffn) for _ in range(c.layers))
        self.ln_f = nn.LayerNorm(c.d)
        self.head = nn.Linear(c.d, c.D)
        self.register_buffer("attn_bias", self._prefix_bias(), persistent=False)
        # bumped on every optimizer step so caches from older weights are refused
        self.param_version = 0

    def _prefix_bias(self) -> Tensor:
        c = self.config
        n = c.ctx_len + c.L
        bias = torch.zeros(n, n)
        bias[: c.ctx_len, c.ctx_len :] = float("-inf")
        return bias

    # -- embeddings ---------------------------------------------------------

    def context_embeddings(self, ctx: ContextBundle) -> Tensor:
        """Input-layer context tokens ``(B, S+1, d)``, before positions/transformer."""
        ctx = ctx.as_batch()
        st = ctx.state_tokens.to(self.pos.dtype)
        if st.shape[1:] != (self.config.S, self.config.d_in):
            raise InvalidArgument(f"state tokens shape {tuple(st.shape)} does not match config")
        tid = ctx.task_id.to(torch.long)
        if torch.any(tid < 0) or torch.any(tid >= self.config.num_tasks):
            raise InvalidArgument("task_id out of range")
        return torch.cat([self.task_embed(tid).unsqueeze(1), self.state_proj(st)], dim=1)

    def embed_actions(self, noisy: Tensor, tau, mask: Tensor) -> Tensor:
        """Time-embedded action hidden states ``(..., L, d)``.

        ``tau`` is a scalar or one value per batch element; the time fed to
        each token is ``tau * m_l``.
        """
        c = self.config
        if noisy.shape[-2:] != (c.L, c.D) or mask.shape != noisy.shape[:-1]:
            raise InvalidArgument("action chunk / mask shape does not match config")
        tau_t = torch.as_tensor(tau, dtype=noisy.dtype)
        while tau_t.dim() < mask.dim():
            tau_t = tau_t.unsqueeze(-1)
        t = tau_t * mask.to(noisy.dtype)
        h = torch.cat([self.action_proj(noisy), sinusoidal_embed(t, c.d, c.time_scale)], dim=-1)
        return self.embed_fc2(F.gelu(self.embed_fc1(h)))

    # -- transformer --------------------------------------------------------

    def forward(self, ctx: ContextBundle, action_hidden: Tensor) -> Tensor:
        """Full-sequence pass; returns velocities ``(B, L, D)``."""
        c = self.config
        ctx_emb = self.context_embeddings(ctx)
        if action_hidden.dim() == 2:
            action_hidden = action_hidden.unsqueeze(0)
        if action_hidden.shape[0] != ctx_emb.shape[0]:
            action_hidden = action_hidden.expand(ctx_emb.shape[0], -1, -1)
        x = torch.cat([ctx_emb, action_hidden], dim=1) + self.pos
        bias = self.attn_bias.to(x.dtype)
        for i, block in enumerate(self.blocks):
            x = block(x, bias)
            _check_finite(x, i)
        return self.head(self.ln_f(x[:, c.ctx_len :]))

    def build_ctx_cache(self, ctx: ContextBundle) -> ContextCache:
        c = self.config
        x = self.context_embeddings(ctx) + self.pos[: c.ctx_len]
        keys, values = [], []
        for i, block in enumerate(self.blocks):
            x, k, v = block.prefix_kv(x)
            _check_finite(x, i)
            keys.append(k)
            values.append(v)
        return ContextCache(keys, values, ctx.fingerprint(), self.param_version)

    def forward_with_cache(
        self, cache: ContextCache, action_hidden: Tensor, ctx: ContextBundle | None = None
    ) -> Tensor:
        """Action positions only, attending to the cached context keys/values."""
        c = self.config
        if cache.param_version != self.param_version:
            raise StaleCacheError("cache was built with older parameters")
        if ctx is not None and ctx.fingerprint() != cache.fingerprint:
            raise StaleCacheError("cache fingerprint does not match the supplied context")
        if action_hidden.dim() == 2:
            action_hidden = action_hidden.unsqueeze(0)
        x = action_hidden + self.pos[c.ctx_len :]
        for i, block in enumerate(self.blocks):
            x = block.with_cache(x, cache.keys[i], cache.values[i])
            _check_finite(x, i)
        return self.head(self.ln_f(x))

    def velocity(self, ctx: ContextBundle, noisy: Tensor, tau, mask: Tensor,
                 cache: ContextCache | None = None) -> Tensor:
        h = self.embed_actions(noisy, tau, mask)
        if cache is None:
            return self.forward(ctx, h)
        return self.forward_with_cache(cache, h)

    def mark_updated(self) -> None:
        self.param_version += 1


def _check_finite(x: Tensor, layer: int) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations after layer {layer}")


def init_params(gen: np.random.Generator, config: BackboneConfig,
                dtype: torch.dtype = torch.float32) -> VelocityModel:
    """Deterministic initialization from the ``init`` stream.

    Linear weights ~ N(0, 1/fan_in) with residual output projections further
    scaled by 1/sqrt(2*layers); biases zero; LayerNorm gains one; embeddings
    and positions N(0, 1) and N(0, 0.02^2).
    """
    model = VelocityModel(config).to(torch.float64)
    init_module(model, gen)
    resid = 1.0 / math.sqrt(2 * config.layers)
    for block in model.blocks:
        init_linear(block.attn.out, gen, resid / math.sqrt(config.d))
        init_linear(block.fc2, gen, resid / math.sqrt(config.ffn))
    with torch.no_grad():
        model.pos.copy_(normal(gen, model.pos.shape, 0.02))
    return model.to(dtype)


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
