"""Synthetic context -> action-chunk tasks with exact ground truth.

Each task owns a mean vector of trajectory coefficients. An episode perturbs
that mean, renders an ``L x D`` chunk from a low-order Fourier basis squashed
into ``[-1, 1]``, and
encodes the coefficients into ``S x d_in`` state tokens through a fixed
orthonormal map plus observation noise.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .backbone import ContextBundle
from .errors import DigestMismatch, FormatError, InvalidArgument
from .rng import make_stream

DATA_MAGIC = b"AFMDATA\x00"
DATA_VERSION = 1
SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass
class TaskSpec:
    num_tasks: int = 4
    L: int = 8
    D: int = 4
    S: int = 8
    d_in: int = 4
    family: str = "fourier"
    harmonics: int = 2
    smoothness: float = 0.6
    amplitude: float = 0.9
    task_spread: float = 0.5
    sigma_obs: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_tasks", "L", "D", "S", "d_in"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"bench.{name} must be positive")
        if self.family not in ("fourier", "linear"):
            raise InvalidArgument(f"unknown trajectory family {self.family!r}")
        if self.family == "fourier" and self.harmonics < 1:
            raise InvalidArgument("fourier family needs at least one harmonic")
        if not 0.0 < self.amplitude <= 1.0:
            raise InvalidArgument("amplitude must lie in (0, 1]")
        if self.sigma_obs < 0 or self.task_spread < 0:
            raise InvalidArgument("sigma_obs and task_spread must be non-negative")
        if self.S * self.d_in < self.num_coeffs:
            raise InvalidArgument(
                f"S*d_in={self.S * self.d_in} too small to encode {self.num_coeffs} coefficients"
            )

    @property
    def basis_size(self) -> int:
        return 2 if self.family == "linear" else 1 + 2 * self.harmonics

    @property
    def num_coeffs(self) -> int:
        return self.D * self.basis_size

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class Dataset:
    contexts: np.ndarray  # (N, S, d_in) float32
    task_ids: np.ndarray  # (N,) int64
    actions: np.ndarray  # (N, L, D) float32
    spec_digest: str = ""
    split: str = ""

    def __len__(self) -> int:
        return len(self.actions)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.contexts[idx], self.task_ids[idx], self.actions[idx],
                       self.spec_digest, self.split)

    def batch(self, idx, dtype: torch.dtype = torch.float32) -> tuple[ContextBundle, torch.Tensor]:
        idx = np.asarray(idx)
        ctx = ContextBundle(torch.from_numpy(self.contexts[idx]).to(dtype),
                            torch.from_numpy(self.task_ids[idx]).to(torch.int64))
        return ctx, torch.from_numpy(self.actions[idx]).to(dtype)

    def context(self, i: int, dtype: torch.dtype = torch.float32) -> ContextBundle:
        return ContextBundle(torch.from_numpy(self.contexts[i]).to(dtype),
                             torch.tensor(int(self.task_ids[i])))


@dataclass
class _TaskModel:
    means: np.ndarray  # (num_tasks, P)
    encoder: np.ndarray  # (S*d_in, P), orthonormal columns
    weights: np.ndarray  # (basis,)
    basis: np.ndarray  # (L, basis)


def _task_model(spec: TaskSpec) -> _TaskModel:
    g = make_stream(spec.seed, "bench:tasks")
    P = spec.num_coeffs
    means = g.uniform(-1.0, 1.0, (spec.num_tasks, P))
    q, r = np.linalg.qr(g.standard_normal((spec.S * spec.d_in, P)))
    encoder = q * np.sign(np.diag(r))
    t = np.arange(spec.L) / spec.L
    if spec.family == "linear":
        basis = np.stack([np.ones_like(t), 2.0 * t - 1.0], axis=1)
        weights = np.array([0.5, 0.5])
    else:
        cols, w = [np.ones_like(t)], [1.0]
        for h in range(1, spec.harmonics + 1):
            cols += [np.sin(2 * np.pi * h * t), np.cos(2 * np.pi * h * t)]
            w += [spec.smoothness ** (h - 1)] * 2
        basis = np.stack(cols, axis=1)
        weights = np.asarray(w)
    return _TaskModel(means, encoder, weights, basis)


def render(spec: TaskSpec, coeffs: np.ndarray) -> np.ndarray:
    """Ground-truth chunks ``(N, L, D)`` from coefficients ``(N, D*basis)`` in [-1, 1].

    The linear family is affine in the coefficients with ``|a| <= amplitude``;
    the Fourier family squashes the harmonic mixture through ``tanh``.
    """
    tm = _task_model(spec)
    z = coeffs.reshape(len(coeffs), spec.D, spec.basis_size)
    raw = np.einsum("ndc,c,lc->nld", z, tm.weights, tm.basis)
    if spec.family == "linear":
        return spec.amplitude * raw
    return spec.amplitude * np.tanh(raw)


def gen_dataset(spec: TaskSpec, n: int, split_seed=0) -> Dataset:
    """``n`` i.i.d. episodes; a pure function of ``(spec, split_seed)``.

    ``split_seed`` may be a split name (``train``/``val``/``test``) or an int.
    """
    spec.validate()
    split = split_seed if isinstance(split_seed, str) else f"seed{split_seed}"
    key = SPLITS.get(split_seed, split_seed) if isinstance(split_seed, str) else split_seed
    if not isinstance(key, int):
        raise InvalidArgument(f"unknown split {split_seed!r}")
    tm = _task_model(spec)
    g = make_stream(spec.seed, f"bench:episodes:{key}")
    task_ids = g.integers(0, spec.num_tasks, n)
    z = tm.means[task_ids] + spec.task_spread * g.uniform(-1.0, 1.0, (n, spec.num_coeffs))
    z = np.clip(z, -1.0, 1.0)
    actions = render(spec, z)
    obs = z @ tm.encoder.T + spec.sigma_obs * g.standard_normal((n, spec.S * spec.d_in))
    return Dataset(
        contexts=obs.reshape(n, spec.S, spec.d_in).astype(np.float32),
        task_ids=task_ids.astype(np.int64),
        actions=actions.astype(np.float32),
        spec_digest=spec.digest(),
        split=split,
    )


# -- corruption -------------------------------------------------------------


@dataclass
class CorruptionSpec:
    """Which tokens to perturb and how.

    ``indices`` fixes the token subset for every episode; when it is empty,
    ``n_random`` distinct tokens are drawn per episode instead.
    """

    indices: tuple[int, ...] = ()
    n_random: int = 1
    scale: float = 1.0
    kind: str = "gaussian-offset"

    def validate(self, L: int) -> None:
        if self.kind not in ("gaussian-offset", "replace-with-noise"):
            raise InvalidArgument(f"unknown corruption kind {self.kind!r}")
        if self.scale < 0:
            raise InvalidArgument("corruption scale must be >= 0")
        if any(not 0 <= i < L for i in self.indices):
            raise InvalidArgument(f"corruption indices must lie in [0, {L})")
        if not self.indices and not 0 <= self.n_random <= L:
            raise InvalidArgument("n_random must lie in [0, L]")


def corruption_mask(spec: CorruptionSpec, batch: int, L: int, rng: np.random.Generator) -> np.ndarray:
    spec.validate(L)
    out = np.zeros((batch, L), dtype=np.int64)
    if spec.indices:
        out[:, list(spec.indices)] = 1
    else:
        for b in range(batch):
            out[b, rng.choice(L, spec.n_random, replace=False)] = 1
    return out


def corrupt(actions: torch.Tensor, spec: CorruptionSpec, rng: np.random.Generator,
            where: np.ndarray | None = None) -> tuple[torch.Tensor, np.ndarray]:
    """Perturb selected tokens; returns the new chunk and the 0/1 token selection.

    Works on ``(L, D)`` or ``(B, L, D)``. Unselected tokens are returned
    bit-unchanged.
    """
    single = actions.dim() == 2
    a = actions.unsqueeze(0) if single else actions
    B, L, D = a.shape
    sel = corruption_mask(spec, B, L, rng) if where is None else np.asarray(where).reshape(B, L)
    out = a.clone()
    rows = torch.from_numpy(sel.astype(bool))
    n = int(rows.sum())
    if n and spec.scale > 0:
        draw = torch.from_numpy(spec.scale * rng.standard_normal((n, D))).to(a.dtype)
        out[rows] = out[rows] + draw if spec.kind == "gaussian-offset" else draw
    elif n and spec.kind == "replace-with-noise":
        out[rows] = 0.0
    return (out[0] if single else out), (sel[0] if single else sel)


# -- dataset file -------------------------------------------------------------


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    N, S, d_in = ds.contexts.shape
    _, L, D = ds.actions.shape
    digest = bytes.fromhex(ds.spec_digest) if ds.spec_digest else bytes(32)
    split = ds.split.encode()
    with open(path, "wb") as f:
        f.write(DATA_MAGIC)
        f.write(struct.pack("<I", DATA_VERSION))
        f.write(digest)
        f.write(struct.pack("<I", len(split)) + split)
        f.write(struct.pack("<5I", N, S, d_in, L, D))
        ctx = ds.contexts.astype("<f4")
        act = ds.actions.astype("<f4")
        for i in range(N):
            f.write(struct.pack("<I", int(ds.task_ids[i])))
            f.write(ctx[i].tobytes(order="C"))
            f.write(act[i].tobytes(order="C"))


def load_dataset(path, expect_digest: str | None = None) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from exc
    if raw[:8] != DATA_MAGIC:
        raise FormatError(f"{path}: not an asyncfm dataset file")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != DATA_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    digest = raw[12:44].hex()
    if expect_digest is not None and digest != expect_digest:
        raise DigestMismatch("dataset spec", expect_digest, digest)
    (slen,) = struct.unpack_from("<I", raw, 44)
    split = raw[48 : 48 + slen].decode()
    off = 48 + slen
    N, S, d_in, L, D = struct.unpack_from("<5I", raw, off)
    off += 20
    rec = np.dtype([("task", "<u4"), ("ctx", "<f4", (S, d_in)), ("act", "<f4", (L, D))])
    if len(raw) - off != N * rec.itemsize:
        raise FormatError(f"{path}: truncated or oversized episode block")
    arr = np.frombuffer(raw, dtype=rec, count=N, offset=off)
    return Dataset(
        contexts=arr["ctx"].astype(np.float32),
        task_ids=arr["task"].astype(np.int64),
        actions=arr["act"].astype(np.float32),
        spec_digest=digest,
        split=split,
    )

