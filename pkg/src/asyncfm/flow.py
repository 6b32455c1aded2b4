"""Flow-matching kernel: paths, noise init, masked Euler integration, sampling, loss.

Time runs from ``tau = 1`` (pure noise) to ``tau = 0`` (clean action). Action
chunks are ``(..., L, D)`` tensors and token masks ``(..., L)`` tensors of 0/1;
leading batch dimensions broadcast through every function here.
"""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch
from torch import Tensor

from .errors import InvalidArgument, NumericError

DEFAULT_STEPS = 10
BETA_SHAPE = (1.5, 1.0)


def _check_pair(a: Tensor, b: Tensor, what: str = "chunks") -> None:
    if a.shape != b.shape:
        raise InvalidArgument(f"{what} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _check_mask(chunk: Tensor, mask: Tensor) -> None:
    if mask.shape != chunk.shape[:-1]:
        raise InvalidArgument(
            f"mask shape {tuple(mask.shape)} does not match chunk tokens {tuple(chunk.shape[:-1])}"
        )


def _rows(mask: Tensor, like: Tensor) -> Tensor:
    return mask.to(like.dtype).unsqueeze(-1)


def gt_velocity(action: Tensor, noise: Tensor) -> Tensor:
    """Target velocity ``u = n - a`` of the straight path from action to noise."""
    _check_pair(action, noise)
    return noise - action


def interp_path(action: Tensor, noise: Tensor, tau, mask: Tensor) -> Tensor:
    """Asynchronous noisy action ``a - tau * (a - n) * m``.

    ``tau`` is a scalar or a tensor broadcastable over the batch dimensions.
    Rows with ``m = 0`` come back as the clean action rows.
    """
    _check_pair(action, noise)
    _check_mask(action, mask)
    tau_t = torch.as_tensor(tau, dtype=action.dtype)
    if torch.any(tau_t < 0) or torch.any(tau_t > 1):
        raise InvalidArgument(f"tau must lie in [0, 1], got {tau}")
    while tau_t.dim() < action.dim() - 1:
        tau_t = tau_t.unsqueeze(-1)
    # (1 - w) a + w n with w = tau * m: same path, exact at w in {0, 1}
    w = (tau_t * mask.to(action.dtype)).unsqueeze(-1)
    return (1 - w) * action + w * noise


def async_init(sfm_actions: Tensor, mask: Tensor, rng: np.random.Generator) -> Tensor:
    """Starting point of the regeneration pass.

    Unmasked rows keep the first-round actions; masked rows are replaced by
    standard-normal draws taken from ``rng`` in row-major (batch, token) order.
    """
    _check_mask(sfm_actions, mask)
    out = sfm_actions.clone()
    sel = mask.to(torch.bool)
    n = int(sel.sum())
    if n:
        draws = rng.standard_normal((n, sfm_actions.shape[-1]))
        out[sel] = torch.from_numpy(draws).to(sfm_actions.dtype)
    return out


def euler_step(state: Tensor, velocity: Tensor, delta: float, mask: Tensor) -> Tensor:
    """One forward-Euler step toward ``tau = 0`` on masked rows only."""
    _check_pair(state, velocity, "state/velocity")
    _check_mask(state, mask)
    if not delta > 0:
        raise InvalidArgument(f"delta must be positive, got {delta}")
    if not torch.isfinite(velocity).all():
        raise NumericError("non-finite velocity in Euler step")
    sel = mask.to(torch.bool).unsqueeze(-1)
    return torch.where(sel, state - delta * velocity, state)


def time_grid(steps: int = DEFAULT_STEPS) -> list[float]:
    """Uniform schedule ``1, 1 - 1/K, ..., 1/K`` (the evaluation times)."""
    if steps < 1:
        raise InvalidArgument("steps must be >= 1")
    return [(steps - k) / steps for k in range(steps)]


def integrate(
    velocity_fn: Callable[[Tensor, float], Tensor],
    init: Tensor,
    mask: Tensor,
    steps: int = DEFAULT_STEPS,
) -> Tensor:
    """Masked Euler integration from ``tau = 1`` down to ``tau = 0``.

    ``velocity_fn(state, tau)`` returns the velocity for every row; unmasked
    rows of its output are ignored. The grid is indexed by an integer step
    counter so exactly ``steps`` evaluations happen.
    """
    delta = 1.0 / steps
    state = init
    for tau in time_grid(steps):
        state = euler_step(state, velocity_fn(state, tau), delta, mask)
    return state


def beta_time_from_uniform(u):
    """Inverse CDF of Beta(1.5, 1): the CDF is ``tau ** 1.5``."""
    return np.power(u, 2.0 / 3.0)


def sample_time(rng: np.random.Generator, size=None):
    """Flow time from Beta(1.5, 1), weighted toward the noisy end."""
    u = 1.0 - rng.random(size)  # (0, 1]
    return beta_time_from_uniform(u)


def mask_from_rate(y: float, uniforms: np.ndarray) -> np.ndarray:
    return (uniforms < y).astype(np.int64)


def sample_mask(rng: np.random.Generator, L: int, size: int | None = None) -> np.ndarray:
    """Draw ``y ~ U(0,1)`` then ``L`` i.i.d. Bernoulli(y) bits.

    With ``size`` set, returns ``(size, L)`` masks; the draw order is all
    rates first, then all bits, row by row.
    """
    if L < 1:
        raise InvalidArgument("L must be >= 1")
    if size is None:
        y = rng.random()
        return mask_from_rate(y, rng.random(L))
    y = rng.random(size)
    return (rng.random((size, L)) < y[:, None]).astype(np.int64)


def masked_loss(pred: Tensor, gt: Tensor, mask: Tensor) -> Tensor:
    """Squared velocity error over masked rows, per masked entry.

    Works on a single chunk or a batch; for a batch, each sample is normalized
    by its own masked-row count times ``D`` and the batch mean is returned.
    Empty masks contribute exactly zero.
    """
    _check_pair(pred, gt, "pred/gt")
    _check_mask(pred, mask)
    m = mask.to(pred.dtype)
    sq = ((pred - gt) ** 2).sum(-1)
    num = (sq * m).sum(-1)
    den = m.sum(-1) * pred.shape[-1]
    per_sample = torch.where(den > 0, num / den.clamp_min(1), torch.zeros_like(num))
    return per_sample.mean() if per_sample.dim() else per_sample
