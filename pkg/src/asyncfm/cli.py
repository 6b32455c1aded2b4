"""Command-line entry point: ``asyncfm <command> [flags]``.

Outputs land in ``$ASYNCFM_OUT_DIR`` (default ``./runs``) unless ``--out`` is
given. Every artifact records the config digest and seed that produced it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .bench import CorruptionSpec, gen_dataset, load_dataset, save_dataset
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (AsyncFMError, ConfigError, DigestMismatch, FormatError, InvalidArgument, InvalidState,
                     NumericError)
from .evaluation import data_efficiency_eval, evaluate, self_correction_eval, stage_timings
from .inference import MODES, infer_episode
from .rng import RngStreams
from .training import train_backbone, train_rater

log = logging.getLogger("asyncfm")

OUT_ENV = "ASYNCFM_OUT_DIR"
EXIT_CODES = {"usage": 2, "config": 2, "format": 3, "digest": 3, "numeric": 4, "state": 5, "io": 6}


def out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _out(args, default_name: str) -> Path:
    path = Path(args.out) if args.out else out_dir() / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _config(args) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    cfg.validate()
    return cfg


def _dataset(data_dir, split: str, expect_digest: str | None):
    path = Path(data_dir) / f"{split}.afmd"
    if not path.exists():
        raise FileNotFoundError(f"dataset file {path} does not exist")
    return load_dataset(path, expect_digest)


def _ckpt(path) -> Checkpoint:
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return load_checkpoint(path)


def _provenance(cfg_digest: str, seed: int) -> str:
    return f"# config_digest={cfg_digest} seed={seed}\n"


def _write_report(path: Path, report, cfg_digest: str, seed: int) -> None:
    report.metrics["config_digest"] = cfg_digest
    report.metrics["seed"] = seed
    path.write_text(report.to_text())
    for table in report.columns:
        path.with_suffix(f".{table}.tsv").write_text(_provenance(cfg_digest, seed) + report.columns_text(table))


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else out_dir() / "data"
    out.mkdir(parents=True, exist_ok=True)
    sizes = {"train": cfg.sizes.n_train, "val": cfg.sizes.n_val, "test": cfg.sizes.n_test}
    for split, n in sizes.items():
        save_dataset(gen_dataset(cfg.bench, n, split), out / f"{split}.afmd")
    (out / "manifest.txt").write_text(
        _provenance(cfg.digest(), cfg.bench.seed)
        + f"bench_digest={cfg.bench.digest()}\n"
        + "".join(f"{k}={v}\n" for k, v in sizes.items())
    )
    print(f"wrote {sum(sizes.values())} episodes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    train = _dataset(args.data, "train", cfg.bench.digest())
    val = _dataset(args.data, "val", cfg.bench.digest())
    out = _out(args, "backbone.ckpt")
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    log_path.write_text("")
    ckpt = train_backbone(train, cfg.backbone_config(), cfg.train, val=val, log_path=log_path,
                          ckpt_dir=out.parent if cfg.train.checkpoint_every else None)
    ckpt.extras.update(experiment_digest=cfg.digest(), bench_digest=cfg.bench.digest(),
                       seed=cfg.train.seed, experiment=cfg.to_dict())
    save_checkpoint(ckpt, out)
    print(f"saved backbone checkpoint to {out}")
    return 0


def cmd_train_rater(args) -> int:
    cfg = _config(args)
    base = _ckpt(args.backbone)
    if base.extras.get("bench_digest") not in (None, cfg.bench.digest()):
        raise DigestMismatch("backbone bench", cfg.bench.digest(), base.extras["bench_digest"])
    train = _dataset(args.data, "train", cfg.bench.digest())
    out = _out(args, "full.ckpt")
    log_path = Path(args.log) if args.log else out.with_suffix(".log")
    log_path.write_text("")
    ckpt = train_rater(train, base, cfg.rater, cfg.train, log_path=log_path)
    ckpt.extras.update(experiment_digest=cfg.digest(), bench_digest=cfg.bench.digest(),
                       seed=cfg.train.seed, experiment=cfg.to_dict())
    save_checkpoint(ckpt, out)
    print(f"saved backbone+rater checkpoint to {out}")
    return 0


def _eval_setup(args):
    ckpt = _ckpt(args.ckpt)
    digest = ckpt.extras.get("bench_digest")
    data = _dataset(args.data, args.split, digest)
    return ckpt, data, ckpt.extras.get("experiment_digest", ckpt.config_digest())


def cmd_infer(args) -> int:
    ckpt, data, cfg_digest = _eval_setup(args)
    if not 0 <= args.episode < len(data):
        raise InvalidArgument(f"episode {args.episode} outside [0, {len(data)})")
    streams = RngStreams(args.seed)
    actions, diag = infer_episode(data.context(args.episode), ckpt.backbone, ckpt.rater, args.mode,
                                  streams, afm_repeats=args.afm_repeats)
    dump = diag.to_dict()
    if not args.timings:
        dump.pop("timings")
    dump.update(
        episode=args.episode,
        split=args.split,
        actions=actions.numpy().tolist(),
        ground_truth=data.actions[args.episode].tolist(),
        config_digest=cfg_digest,
        seed=args.seed,
    )
    out = _out(args, f"infer_{args.split}_{args.episode}_{args.mode}.json")
    out.write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt, data, cfg_digest = _eval_setup(args)
    report = evaluate(ckpt.backbone, ckpt.rater, data, args.mode, seed=args.seed,
                      success_eps=args.success_eps, afm_repeats=args.afm_repeats)
    out = _out(args, f"eval_{args.mode}.txt")
    _write_report(out, report, cfg_digest, args.seed)
    if args.timings:
        t = stage_timings(ckpt.backbone, ckpt.rater, data, episodes=args.timing_episodes,
                          seed=args.seed, mode=args.mode)
        out.with_suffix(".timings.txt").write_text(
            _provenance(cfg_digest, args.seed) + "".join(f"{k}={v}\n" for k, v in sorted(t.items()))
        )
    print(f"wrote {out}")
    return 0


def cmd_self_correct(args) -> int:
    ckpt, data, cfg_digest = _eval_setup(args)
    try:
        indices = tuple(int(i) for i in args.indices.split(",")) if args.indices else ()
    except ValueError as exc:
        raise InvalidArgument(f"--indices must be comma-separated integers, got {args.indices!r}") from exc
    spec = CorruptionSpec(indices=indices, n_random=args.n_random, scale=args.scale, kind=args.kind)
    report = self_correction_eval(ckpt.backbone, ckpt.rater, data, spec, seed=args.seed,
                                  success_eps=args.success_eps)
    out = _out(args, "self_correct.txt")
    _write_report(out, report, cfg_digest, args.seed)
    print(f"wrote {out}")
    return 0


def cmd_data_efficiency(args) -> int:
    cfg = _config(args)
    de = cfg.data_efficiency
    epochs = args.epochs if args.epochs is not None else de.epochs
    res = data_efficiency_eval(cfg.bench, de.fractions, epochs, seeds=de.seeds,
                               backbone_config=cfg.backbone_config(), train_config=cfg.train,
                               n_train=cfg.sizes.n_train, n_heldout=de.heldout)
    out = Path(args.out) if args.out else out_dir() / "data_efficiency"
    out.mkdir(parents=True, exist_ok=True)
    summary = [_provenance(cfg.digest(), cfg.train.seed).rstrip("\n")]
    for (frac, seed), curves in sorted(res.items()):
        u, a = curves["unified"], curves["all-one"]
        rows = ["epoch\tunified_train\tallone_train\tunified_heldout_masked\tallone_heldout_masked"
                "\tunified_heldout_sfm\tallone_heldout_sfm"]
        for e in range(len(u["train"])):
            rows.append("\t".join([str(e)] + [f"{x:.10g}" for x in (
                u["train"][e], a["train"][e], u["heldout_masked"][e], a["heldout_masked"][e],
                u["heldout_sfm"][e], a["heldout_sfm"][e])]))
        name = f"curves_frac{frac:g}_seed{seed}.tsv"
        (out / name).write_text(_provenance(cfg.digest(), seed) + "\n".join(rows) + "\n")
        late = slice(min(20, len(u["train"])), None)
        wins = np.asarray(u["heldout_masked"][late]) <= np.asarray(a["heldout_masked"][late])
        summary.append(f"frac={frac:g}\tseed={seed}\tunified_le_allone_after_epoch20={wins.mean() if wins.size else float('nan'):.10g}")
    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    print(f"wrote curves to {out}")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="asyncfm", description=__doc__, formatter_class=fmt)
    p.add_argument("--threads", type=int, default=1, help="cap on torch worker threads")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=func)
        sp.add_argument("--out", default=None, help=f"output path (default under ${OUT_ENV} or ./runs)")
        return sp

    def with_config(sp):
        sp.add_argument("--config", default=None, help="experiment config JSON (defaults if omitted)")

    def with_eval(sp):
        sp.add_argument("--ckpt", required=True, help="checkpoint file")
        sp.add_argument("--data", required=True, help="dataset directory from gen-data")
        sp.add_argument("--split", default="test", choices=("train", "val", "test"), help="dataset split")
        sp.add_argument("--seed", type=int, default=0, help="inference noise seed")

    sp = add("gen-data", cmd_gen_data, "generate train/val/test synthetic datasets")
    with_config(sp)

    sp = add("train", cmd_train, "unified masked flow-matching training of the backbone")
    with_config(sp)
    sp.add_argument("--data", required=True, help="dataset directory from gen-data")
    sp.add_argument("--log", default=None, help="training log path (default: next to checkpoint)")

    sp = add("train-rater", cmd_train_rater, "train the confidence rater on a frozen backbone")
    with_config(sp)
    sp.add_argument("--data", required=True, help="dataset directory from gen-data")
    sp.add_argument("--backbone", required=True, help="trained backbone checkpoint")
    sp.add_argument("--log", default=None, help="training log path (default: next to checkpoint)")

    sp = add("infer", cmd_infer, "run one episode and dump actions plus diagnostics")
    with_eval(sp)
    sp.add_argument("--episode", type=int, default=0, help="episode index within the split")
    sp.add_argument("--mode", default="async", choices=MODES, help="inference mode")
    sp.add_argument("--afm-repeats", type=int, default=1, help="regeneration rounds")
    sp.add_argument("--timings", action="store_true", help="include wall-clock stage timings")

    sp = add("eval", cmd_eval, "evaluate one inference mode on a dataset split")
    with_eval(sp)
    sp.add_argument("--mode", default="async", choices=MODES, help="inference mode")
    sp.add_argument("--afm-repeats", type=int, default=1, help="regeneration rounds")
    sp.add_argument("--success-eps", type=float, default=0.1, help="per-token error tube for success")
    sp.add_argument("--timings", action="store_true", help="also write a stage-timing file")
    sp.add_argument("--timing-episodes", type=int, default=100, help="episodes timed individually")

    sp = add("self-correct", cmd_self_correct, "corruption-injection ablation of regeneration strategies")
    with_eval(sp)
    sp.add_argument("--scale", type=float, default=1.0, help="corruption scale")
    sp.add_argument("--kind", default="gaussian-offset", choices=("gaussian-offset", "replace-with-noise"),
                    help="corruption kind")
    sp.add_argument("--n-random", type=int, default=1, help="random tokens corrupted per episode")
    sp.add_argument("--indices", default="", help="comma-separated fixed token indices (overrides --n-random)")
    sp.add_argument("--success-eps", type=float, default=0.1, help="per-token error tube for success")

    sp = add("data-efficiency", cmd_data_efficiency, "seed-matched unified vs all-one-mask training curves")
    with_config(sp)
    sp.add_argument("--epochs", type=int, default=None, help="override data_efficiency.epochs")
    return p


def _category(exc: BaseException) -> str:
    if isinstance(exc, DigestMismatch):
        return "digest"
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, FormatError):
        return "format"
    if isinstance(exc, InvalidArgument):
        return "usage"
    if isinstance(exc, NumericError):
        return "numeric"
    if isinstance(exc, InvalidState):
        return "state"
    if isinstance(exc, OSError):
        return "io"
    return "error"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (AsyncFMError, OSError) as exc:
        cat = _category(exc)
        print(f"error[{cat}]: {exc}", file=sys.stderr)
        return EXIT_CODES.get(cat, 1)


if __name__ == "__main__":
    sys.exit(main())
