import hashlib
import json

import pytest

from asyncfm import cli

TINY = {
    "bench": {"num_tasks": 3, "L": 4, "D": 3, "S": 3, "d_in": 5},
    "sizes": {"n_train": 48, "n_val": 16, "n_test": 12},
    "model": {"d": 16, "layers": 1, "heads": 2, "ffn": 32},
    "rater": {"layers": 1, "heads": 2, "ffn": 16, "d_r": 16},
    "train": {"epochs": 2, "batch_size": 16, "rater_epochs": 2, "rater_rollouts": 1},
    "data_efficiency": {"fractions": [0.5], "epochs": 2, "seeds": [0], "heldout": 8},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


def pipeline(root, cfg_path):
    data, out = root / "data", root
    assert run("gen-data", "--config", cfg_path, "--out", data) == 0
    assert run("train", "--config", cfg_path, "--data", data, "--out", out / "bb.ckpt") == 0
    assert run("train-rater", "--config", cfg_path, "--data", data, "--backbone", out / "bb.ckpt",
               "--out", out / "full.ckpt") == 0
    for mode in ("sfm-only", "async", "random-mask"):
        assert run("infer", "--ckpt", out / "full.ckpt", "--data", data, "--episode", 2, "--mode", mode,
                   "--out", out / f"infer_{mode}.json") == 0
        assert run("eval", "--ckpt", out / "full.ckpt", "--data", data, "--mode", mode,
                   "--out", out / f"eval_{mode}.txt") == 0
    assert run("self-correct", "--ckpt", out / "full.ckpt", "--data", data, "--out", out / "sc.txt") == 0
    assert run("data-efficiency", "--config", cfg_path, "--out", out / "de") == 0


def snapshot(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    cfg = tmp_path_factory.mktemp("cfg") / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    roots = [tmp_path_factory.mktemp(f"run{k}") for k in range(2)]
    for r in roots:
        pipeline(r, cfg)
    return cfg, roots


def test_outputs_byte_identical(runs):
    _, (a, b) = runs
    sa, sb = snapshot(a), snapshot(b)
    assert len(sa) > 15
    assert sa == sb


def test_artifacts_carry_digest_and_seed(runs):
    _, (a, _) = runs
    for name in ("eval_async.txt", "sc.txt"):
        text = (a / name).read_text()
        assert "config_digest=" in text and "seed=" in text
    for tsv in list(a.glob("*.tsv")) + list((a / "de").glob("*")):
        assert tsv.read_text().startswith("# config_digest=")
    dump = json.loads((a / "infer_async.json").read_text())
    assert {"config_digest", "seed", "actions", "mask", "confidence"} <= set(dump)
    assert "timings" not in dump
    assert "config_digest=" in (a / "data" / "manifest.txt").read_text()


def test_sfm_stage_identical_across_modes(runs):
    _, (a, _) = runs
    dumps = {m: json.loads((a / f"infer_{m}.json").read_text()) for m in ("sfm-only", "async")}
    assert dumps["sfm-only"]["sfm_actions"] == dumps["async"]["sfm_actions"]
    assert dumps["sfm-only"]["rater_called"] is False and dumps["async"]["rater_called"] is True


def test_inputs_not_mutated(runs, tmp_path):
    cfg, (a, _) = runs
    before = snapshot(a / "data")
    ckpt = (a / "full.ckpt").read_bytes()
    assert run("eval", "--ckpt", a / "full.ckpt", "--data", a / "data", "--out", tmp_path / "e.txt") == 0
    assert snapshot(a / "data") == before and (a / "full.ckpt").read_bytes() == ckpt


def test_env_out_dir(runs, tmp_path, monkeypatch):
    _, (a, _) = runs
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    assert run("infer", "--ckpt", a / "full.ckpt", "--data", a / "data") == 0
    assert (tmp_path / "envout" / "infer_test_0_async.json").exists()


def test_timing_file_optional(runs, tmp_path):
    _, (a, _) = runs
    out = tmp_path / "t.txt"
    assert run("eval", "--ckpt", a / "full.ckpt", "--data", a / "data", "--timings",
               "--timing-episodes", 3, "--out", out) == 0
    assert "time_sfm=" in out.with_suffix(".timings.txt").read_text()
    assert "time_" not in out.read_text()


def test_error_exit_codes(runs, tmp_path, capsys):
    cfg, (a, _) = runs
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "train": {"epochs": "x"}\n}')
    assert run("gen-data", "--config", bad, "--out", tmp_path / "d") == 2
    assert "train.epochs" in capsys.readouterr().err

    other = tmp_path / "other.json"
    other.write_text(json.dumps({**TINY, "bench": {**TINY["bench"], "seed": 5}}))
    assert run("train", "--config", other, "--data", a / "data", "--out", tmp_path / "x.ckpt") == 3
    err = capsys.readouterr().err
    assert "expected" in err and "found" in err

    assert run("eval", "--ckpt", a / "bb.ckpt", "--data", a / "data") == 5
    assert run("infer", "--ckpt", tmp_path / "missing.ckpt", "--data", a / "data") != 0
    (tmp_path / "junk.ckpt").write_bytes(b"nonsense")
    assert run("infer", "--ckpt", tmp_path / "junk.ckpt", "--data", a / "data") == 3
    assert run("infer", "--ckpt", a / "full.ckpt", "--data", a / "data", "--episode", 999) == 2


SUBCOMMANDS = ["gen-data", "train", "train-rater", "infer", "eval", "self-correct", "data-efficiency"]


@pytest.mark.parametrize("sub", SUBCOMMANDS)
def test_help_lists_defaults(sub, capsys):
    with pytest.raises(SystemExit) as info:
        run(sub, "--help")
    assert info.value.code == 0
    text = capsys.readouterr().out
    assert "--out" in text and "(default:" in text


def test_top_level_help(capsys):
    with pytest.raises(SystemExit):
        run("--help")
    text = capsys.readouterr().out
    for sub in SUBCOMMANDS:
        assert sub in text
    assert "--threads" in text
