"""Pre-norm transformer blocks with an explicit key/value path for caching."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.dh = d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def split(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        B, N, _ = x.shape
        q, k, v = self.qkv(x).view(B, N, 3, self.heads, self.dh).permute(2, 0, 3, 1, 4)
        return q, k, v

    def attend(self, q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None) -> Tensor:
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dh)
        if bias is not None:
            scores = scores + bias
        w = torch.softmax(scores, dim=-1)
        y = w @ v
        B, H, N, dh = y.shape
        return self.out(y.transpose(1, 2).reshape(B, N, H * dh))


class Block(nn.Module):
    def __init__(self, d: int, heads: int, ffn: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.fc1 = nn.Linear(d, ffn)
        self.fc2 = nn.Linear(ffn, d)

    def mlp(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(self.ln2(x))))

    def forward(self, x: Tensor, bias: Tensor | None = None) -> Tensor:
        q, k, v = self.attn.split(self.ln1(x))
        x = x + self.attn.attend(q, k, v, bias)
        return x + self.mlp(x)

    def prefix_kv(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Run a self-contained prefix; returns (output, keys, values)."""
        q, k, v = self.attn.split(self.ln1(x))
        x = x + self.attn.attend(q, k, v)
        return x + self.mlp(x), k, v

    def with_cache(self, x: Tensor, k_cache: Tensor, v_cache: Tensor) -> Tensor:
        """Suffix positions attending to cached prefix keys/values plus themselves."""
        q, k, v = self.attn.split(self.ln1(x))
        if k_cache.shape[0] != x.shape[0]:
            k_cache = k_cache.expand(x.shape[0], -1, -1, -1)
            v_cache = v_cache.expand(x.shape[0], -1, -1, -1)
        k = torch.cat([k_cache, k], dim=2)
        v = torch.cat([v_cache, v], dim=2)
        x = x + self.attn.attend(q, k, v)
        return x + self.mlp(x)


def normal(gen: np.random.Generator, shape, std: float = 1.0) -> Tensor:
    return torch.from_numpy(gen.standard_normal(tuple(shape)) * std)


def init_linear(layer: nn.Linear, gen: np.random.Generator, std: float | None = None) -> None:
    fan_in = layer.weight.shape[1]
    std = (1.0 / math.sqrt(fan_in)) if std is None else std
    with torch.no_grad():
        layer.weight.copy_(normal(gen, layer.weight.shape, std))
        if layer.bias is not None:
            layer.bias.zero_()


def init_module(module: nn.Module, gen: np.random.Generator) -> None:
    """Scaled-normal weights (std 1/sqrt(fan_in)), zero biases, unit LayerNorm."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            init_linear(m, gen)
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.copy_(normal(gen, m.weight.shape))
