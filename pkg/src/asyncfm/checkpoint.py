"""Versioned binary checkpoint container.

Layout (all integers little-endian u32)::

    magic "AFMCKPT\\0" | version | config digest (32 bytes)
    meta length | meta JSON (configs, epoch, loss history, seed, extras)
    tensor count | per tensor: name length, name, rank, dims..., f32 data (row-major)
    stream count | per stream: name length, name, state length, state JSON
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, VelocityModel
from .errors import DigestMismatch, FormatError
from .rater import ConfidenceRater, RaterConfig

MAGIC = b"AFMCKPT\x00"
VERSION = 1


@dataclass
class Checkpoint:
    backbone: VelocityModel
    backbone_config: BackboneConfig
    rater: ConfidenceRater | None = None
    rater_config: RaterConfig | None = None
    train_config: dict = field(default_factory=dict)
    rng_state: dict[str, dict] = field(default_factory=dict)
    epoch: int = 0
    loss_history: dict[str, list] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def configs(self) -> dict:
        return {
            "backbone": self.backbone_config.to_dict(),
            "rater": None if self.rater_config is None else self.rater_config.to_dict(),
            "train": self.train_config,
        }

    def config_digest(self) -> str:
        return config_digest(self.configs())


def config_digest(configs: dict) -> str:
    return hashlib.sha256(json.dumps(configs, sort_keys=True).encode()).hexdigest()


def _u32(x: int) -> bytes:
    return struct.pack("<I", x)


def _tensors(ckpt: Checkpoint):
    for prefix, module in (("backbone", ckpt.backbone), ("rater", ckpt.rater)):
        if module is None:
            continue
        for name, t in module.state_dict().items():
            yield f"{prefix}.{name}", t.detach().cpu().to(torch.float32).contiguous().numpy()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    meta = {
        "configs": ckpt.configs(),
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "extras": ckpt.extras,
        "rater_ready": bool(ckpt.rater is not None and ckpt.rater.ready),
        "rater_geometry": None if ckpt.rater is None else ckpt.rater.geometry,
    }
    parts = [MAGIC, _u32(VERSION), bytes.fromhex(ckpt.config_digest())]
    blob = json.dumps(meta, sort_keys=True).encode()
    parts += [_u32(len(blob)), blob]
    tensors = list(_tensors(ckpt))
    parts.append(_u32(len(tensors)))
    for name, arr in tensors:
        nb = name.encode()
        parts += [_u32(len(nb)), nb, _u32(arr.ndim)]
        parts += [_u32(int(d)) for d in arr.shape]
        parts.append(arr.astype("<f4").tobytes(order="C"))
    parts.append(_u32(len(ckpt.rng_state)))
    for name, state in sorted(ckpt.rng_state.items()):
        nb = name.encode()
        sb = json.dumps(state, sort_keys=True).encode()
        parts += [_u32(len(nb)), nb, _u32(len(sb)), sb]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw, self.off, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expect_digest: str | None = None) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(8) != MAGIC:
        raise FormatError(f"{path}: not an asyncfm checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32).hex()
    meta = json.loads(r.take(r.u32()))
    found = config_digest(meta["configs"])
    if found != digest:
        raise DigestMismatch("checkpoint config", digest, found)
    if expect_digest is not None and digest != expect_digest:
        raise DigestMismatch("checkpoint config", expect_digest, digest)

    tensors: dict[str, torch.Tensor] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        dims = [r.u32() for _ in range(r.u32())]
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    rng_state = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rng_state[name] = json.loads(r.take(r.u32()))
    if r.off != len(raw):
        raise FormatError(f"{path}: trailing bytes after checkpoint")

    cfgs = meta["configs"]
    bcfg = BackboneConfig(**cfgs["backbone"])
    backbone = VelocityModel(bcfg)
    backbone.load_state_dict(_section(tensors, "backbone"))
    rater = rcfg = None
    if cfgs["rater"] is not None:
        rcfg = RaterConfig(**cfgs["rater"])
    if rcfg is not None and meta["rater_geometry"] is not None:
        rater = ConfidenceRater(rcfg, **meta["rater_geometry"])
        rater.load_state_dict(_section(tensors, "rater"))
        rater.ready = meta["rater_ready"]
    return Checkpoint(
        backbone=backbone,
        backbone_config=bcfg,
        rater=rater,
        rater_config=rcfg,
        train_config=cfgs["train"],
        rng_state=rng_state,
        epoch=meta["epoch"],
        loss_history=meta["loss_history"],
        extras=meta["extras"],
    )


def _section(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    n = len(prefix) + 1
    return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
