"""Evaluation harnesses: plain evaluation, self-correction ablations, data efficiency."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import flow
from .backbone import BackboneConfig, VelocityModel
from .bench import CorruptionSpec, Dataset, TaskSpec, corrupt, gen_dataset
from .errors import InvalidArgument
from .inference import MODES, afm_regenerate, infer, infer_episode, sfm_generate
from .rater import ConfidenceRater, build_mask, per_token_error
from .rng import RngStreams
from .training import TrainConfig, heldout_loss, train_backbone

SUCCESS_EPS = 0.1
ABLATIONS = ("sfm-only", "random-mask", "async", "oracle")
HELDOUT_SEED = 10_007


@dataclass
class EvalReport:
    """Flat key/value metrics plus plot-ready columns.

    Rates lie in [0, 1]. Column arrays share one length per table.
    """

    metrics: dict[str, float | int | str] = field(default_factory=dict)
    columns: dict[str, dict[str, list]] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.metrics[key]

    def to_text(self) -> str:
        lines = []
        for key in sorted(self.metrics):
            v = self.metrics[key]
            lines.append(f"{key}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    def columns_text(self, table: str) -> str:
        cols = self.columns[table]
        names = list(cols)
        rows = ["\t".join(names)]
        for i in range(len(cols[names[0]])):
            rows.append("\t".join(_fmt(cols[n][i]) for n in names))
        return "\n".join(rows) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def _episode_metrics(final: torch.Tensor, gt: torch.Tensor, eps: float):
    e = per_token_error(final, gt)
    return e, (e.max(-1).values <= eps)


@torch.no_grad()
def evaluate(backbone: VelocityModel, rater: ConfidenceRater | None, data: Dataset, mode: str,
             *, seed: int = 0, T: float | None = None, steps: int = flow.DEFAULT_STEPS,
             afm_repeats: int = 1, success_eps: float = SUCCESS_EPS,
             batch_size: int = 250) -> EvalReport:
    """Chunk/per-token MSE, success rate and mask statistics for one inference mode."""
    if mode not in MODES:
        raise InvalidArgument(f"unknown mode {mode!r}")
    streams = RngStreams(seed, names=("noise", "mask"))
    dtype = backbone.pos.dtype
    errs, succ, masks = [], [], []
    for start in range(0, len(data), batch_size):
        ctx, gt = data.batch(np.arange(start, min(start + batch_size, len(data))), dtype)
        out, diag = infer(ctx, backbone, rater, mode, streams, T=T, steps=steps, afm_repeats=afm_repeats)
        e, s = _episode_metrics(out, gt, success_eps)
        errs.append(e)
        succ.append(s)
        if diag.mask is not None:
            masks.append(diag.mask)
    e = torch.cat(errs)
    per_token = e.mean(0)
    m = {
        "mode": mode,
        "episodes": len(data),
        "seed": seed,
        "chunk_mse": float(e.mean()),
        "success_rate": float(torch.cat(succ).float().mean()),
        "success_eps": success_eps,
    }
    if masks:
        mk = np.concatenate(masks)
        m["mask_rate"] = float(mk.mean())
        m["mask_empty_rate"] = float((mk.sum(1) == 0).mean())
        m["mask_full_rate"] = float((mk.sum(1) == mk.shape[1]).mean())
    for l, v in enumerate(per_token.tolist()):
        m[f"token_mse_{l}"] = v
    cols = {"per_token": {"token": list(range(len(per_token))), "mse": per_token.tolist()}}
    return EvalReport(m, cols)


@torch.no_grad()
def self_correction_eval(backbone: VelocityModel, rater: ConfidenceRater | None, data: Dataset,
                         corruption: CorruptionSpec, *, seed: int = 0, T: float | None = None,
                         steps: int = flow.DEFAULT_STEPS, success_eps: float = SUCCESS_EPS,
                         batch_size: int = 250) -> EvalReport:
    """Corrupt first-round chunks, then compare regeneration strategies side by side.

    Every strategy starts from the same corrupted chunk and draws its
    regeneration noise from an identical copy of one stream, so differences
    come from the mask alone. ``oracle`` masks exactly the corrupted tokens.
    """
    streams = RngStreams(seed, names=("noise", "mask", "corrupt", "afm"))
    dtype = backbone.pos.dtype
    L = backbone.config.L
    acc: dict[str, list] = {k: [] for k in ("sel", "gt", "sfm", "corrupted")}
    for mode in ABLATIONS:
        acc[f"out:{mode}"] = []
        acc[f"mask:{mode}"] = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        ctx, gt = data.batch(idx, dtype)
        cache = backbone.build_ctx_cache(ctx)
        sfm = sfm_generate(backbone, ctx, streams["noise"], steps, cache)
        bad, sel = corrupt(sfm, corruption, streams["corrupt"])
        sel_t = torch.from_numpy(sel)
        rand_mask = torch.from_numpy((streams["mask"].random((len(idx), L)) < 0.5).astype(np.int64))
        afm_state = streams["afm"].bit_generator.state
        for mode in ABLATIONS:
            if mode == "sfm-only":
                mask = torch.zeros(len(idx), L, dtype=torch.int64)
            elif mode == "random-mask":
                mask = rand_mask
            elif mode == "oracle":
                mask = sel_t.to(torch.int64)
            else:
                if rater is None:
                    raise InvalidArgument("async ablation needs a confidence rater")
                p = rater.score(backbone.context_embeddings(ctx), bad)
                mask = build_mask(p, rater.config.T if T is None else T)
            streams["afm"].bit_generator.state = afm_state
            out = afm_regenerate(backbone, ctx, bad, mask, streams["afm"], steps, cache)
            acc[f"out:{mode}"].append(out)
            acc[f"mask:{mode}"].append(mask)
        acc["sel"].append(sel_t.to(torch.bool))
        acc["gt"].append(gt)
        acc["sfm"].append(sfm)
        acc["corrupted"].append(bad)

    sel = torch.cat(acc["sel"])
    gt = torch.cat(acc["gt"])
    e_sfm = per_token_error(torch.cat(acc["sfm"]), gt)
    e_bad = per_token_error(torch.cat(acc["corrupted"]), gt)
    bad_fail = e_bad.max(-1).values > success_eps
    m: dict = {
        "episodes": len(data),
        "seed": seed,
        "corruption_kind": corruption.kind,
        "corruption_scale": corruption.scale,
        "corrupted_tokens": int(sel.sum()),
        "success_eps": success_eps,
        "sfm_chunk_mse": float(e_sfm.mean()),
        "sfm_success_rate": float((e_sfm.max(-1).values <= success_eps).float().mean()),
        "corrupted_token_mse_before": _masked_mean(e_bad, sel),
        "clean_token_mse_before": _masked_mean(e_bad, ~sel),
    }
    cols = {"token": list(range(L)), "sfm": e_sfm.mean(0).tolist(), "corrupted": e_bad.mean(0).tolist()}
    for mode in ABLATIONS:
        out = torch.cat(acc[f"out:{mode}"])
        mask = torch.cat(acc[f"mask:{mode}"]).to(torch.bool)
        e = per_token_error(out, gt)
        ok = e.max(-1).values <= success_eps
        key = mode.replace("-", "_")
        m[f"{key}.chunk_mse"] = float(e.mean())
        m[f"{key}.success_rate"] = float(ok.float().mean())
        m[f"{key}.corrupted_token_mse_after"] = _masked_mean(e, sel)
        m[f"{key}.clean_token_mse_after"] = _masked_mean(e, ~sel)
        m[f"{key}.detection_rate"] = _masked_mean(mask.to(e.dtype), sel)
        m[f"{key}.false_mask_rate"] = _masked_mean(mask.to(e.dtype), ~sel)
        m[f"{key}.mask_cardinality"] = float(mask.sum(-1).float().mean())
        m[f"{key}.recovery_rate"] = float(ok[bad_fail].float().mean()) if bool(bad_fail.any()) else 1.0
        before = m["corrupted_token_mse_before"]
        m[f"{key}.corrupted_mse_reduction"] = (
            1.0 - m[f"{key}.corrupted_token_mse_after"] / before if before > 0 else 0.0
        )
        cols[key] = e.mean(0).tolist()
    return EvalReport(m, {"per_token": cols})


def _masked_mean(x: torch.Tensor, sel: torch.Tensor) -> float:
    n = int(sel.sum())
    return float(x[sel].sum() / n) if n else 0.0


@torch.no_grad()
def stage_timings(backbone: VelocityModel, rater: ConfidenceRater, data: Dataset, *, episodes: int = 100,
                  seed: int = 0, mode: str = "async", **kwargs) -> dict[str, float]:
    """Mean per-episode wall time of each inference stage, single-episode calls."""
    streams = RngStreams(seed, names=("noise", "mask"))
    dtype = backbone.pos.dtype
    tot = {"sfm": 0.0, "rater": 0.0, "afm": 0.0}
    card = []
    n = min(episodes, len(data))
    # one untimed call to settle allocator and dispatch caches
    infer_episode(data.context(0, dtype), backbone, rater, mode, streams, **kwargs)
    for i in range(n):
        _, diag = infer_episode(data.context(i, dtype), backbone, rater, mode, streams, **kwargs)
        for k in tot:
            tot[k] += diag.timings[k]
        if diag.mask is not None:
            card.append(int(diag.mask.sum()))
    out = {f"time_{k}": v / n for k, v in tot.items()}
    total = sum(tot.values())
    for k, v in tot.items():
        out[f"time_share_{k}"] = v / total if total else 0.0
    out["mean_mask_cardinality"] = float(np.mean(card)) if card else 0.0
    out["timed_episodes"] = n
    return out


def data_efficiency_eval(
    spec: TaskSpec,
    fractions,
    epochs: int,
    *,
    seeds=(0,),
    backbone_config: BackboneConfig | None = None,
    train_config: TrainConfig | None = None,
    n_train: int = 4000,
    n_heldout: int = 256,
    on_epoch=None,
) -> dict:
    """Seed-matched unified vs all-one-mask training on reduced data.

    Returns ``{(fraction, seed): {variant: {"train": [...], "heldout_masked":
    [...], "heldout_sfm": [...]}}}``. Both variants share initialization,
    data order, times and noise; only the masks differ. Held-out curves use
    draws fixed across epochs and variants.
    """
    bcfg = backbone_config or BackboneConfig(L=spec.L, D=spec.D, S=spec.S, d_in=spec.d_in,
                                             num_tasks=spec.num_tasks)
    base = train_config or TrainConfig()
    full = gen_dataset(spec, n_train, "train")
    held = gen_dataset(spec, n_heldout, "val")
    out = {}
    for frac in fractions:
        if not 0.0 < frac <= 1.0:
            raise InvalidArgument(f"fraction {frac} outside (0, 1]")
        sub = full.subset(np.arange(max(1, int(round(frac * len(full))))))
        for seed in seeds:
            res = {}
            for variant, mask_mode in (("unified", "bernoulli"), ("all-one", "all-one")):
                cfg = TrainConfig(**{**base.to_dict(), "seed": seed, "epochs": epochs,
                                     "mask_mode": mask_mode})
                curves = {"train": [], "heldout_masked": [], "heldout_sfm": []}

                def hook(epoch, row, model, _curves=curves, _variant=variant, _seed=seed, _frac=frac):
                    model.eval()
                    _curves["train"].append(row["train"])
                    _curves["heldout_masked"].append(heldout_loss(model, held, HELDOUT_SEED, "bernoulli"))
                    _curves["heldout_sfm"].append(heldout_loss(model, held, HELDOUT_SEED, "all-one"))
                    model.train()
                    if on_epoch is not None:
                        on_epoch(_frac, _seed, _variant, epoch, _curves)

                train_backbone(sub, bcfg, cfg, on_epoch=hook)
                res[variant] = curves
            out[(frac, seed)] = res
    return out
