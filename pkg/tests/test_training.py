import numpy as np
import pytest
import torch

from asyncfm import flow
from asyncfm.backbone import init_params, param_digest
from asyncfm.bench import TaskSpec, gen_dataset
from asyncfm.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from asyncfm.errors import DigestMismatch, FormatError, InvalidState
from asyncfm.rater import RaterConfig
from asyncfm.rng import RngStreams
from asyncfm.training import TrainConfig, make_optimizer, train_backbone, train_rater, train_step

from conftest import tiny_config
from oracles import vanilla_sfm_losses

SPEC = TaskSpec(num_tasks=3, L=4, D=3, S=3, d_in=5)
TINY_RATER = RaterConfig(layers=1, heads=2, ffn=16, d_r=16)


@pytest.fixture(scope="module")
def data():
    return gen_dataset(SPEC, 96, "train")


def test_all_one_masks_match_vanilla_sfm(data):
    cfg = tiny_config()
    tcfg = TrainConfig(batch_size=16, epochs=9, seed=3, mask_mode="all-one")
    ref = vanilla_sfm_losses(data, cfg, tcfg, 50)
    got = []
    streams = RngStreams(tcfg.seed)
    model = init_params(streams["init"], cfg, torch.float64)
    model.train()
    opt = make_optimizer(model, tcfg)
    while len(got) < 50:
        order = streams["data"].permutation(len(data))
        for start in range(0, len(order), tcfg.batch_size):
            if len(got) == 50:
                break
            ctx, a = data.batch(order[start : start + tcfg.batch_size], torch.float64)
            got.append(train_step(model, opt, ctx, a, streams, "all-one"))
    rel = np.abs(np.array(got) - np.array(ref)) / np.abs(np.array(ref))
    assert rel.max() <= 1e-10, rel.max()


def test_all_zero_masks_leave_parameters(data):
    streams = RngStreams(0)
    model = init_params(streams["init"], tiny_config())
    opt = make_optimizer(model, TrainConfig())
    before = param_digest(model)
    ctx, a = data.batch(np.arange(16))
    assert train_step(model, opt, ctx, a, streams, "all-zero") == 0.0
    assert param_digest(model) == before
    assert model.param_version == 0


def test_step_intermediates_match_kernel(data):
    streams = RngStreams(5)
    model = init_params(streams["init"], tiny_config(), torch.float64)
    ctx, a = data.batch(np.arange(8), torch.float64)
    trace = {}
    loss = train_step(model, None, ctx, a, streams, "bernoulli", trace=trace)
    assert torch.equal(trace["noisy"], flow.interp_path(a, trace["noise"], trace["tau"], trace["mask"]))
    assert torch.equal(trace["u"], flow.gt_velocity(a, trace["noise"]))
    assert loss == float(flow.masked_loss(trace["pred"], trace["u"], trace["mask"]))
    # draw order: masks, then times, then noise, each from its own stream
    ref = RngStreams(5)
    assert np.array_equal(trace["mask"].numpy(), flow.sample_mask(ref["mask"], 4, size=8))
    assert np.array_equal(trace["tau"].numpy(), flow.sample_time(ref["time"], 8))


def test_training_deterministic(data, tmp_path):
    tcfg = TrainConfig(batch_size=32, epochs=2, seed=1)
    runs = []
    for k in range(2):
        log_path = tmp_path / f"log{k}.tsv"
        ckpt = train_backbone(data, tiny_config(), tcfg, val=data.subset(np.arange(16)), log_path=log_path)
        save_checkpoint(ckpt, tmp_path / f"c{k}.ckpt")
        runs.append((ckpt.loss_history["train"], log_path.read_bytes(), (tmp_path / f"c{k}.ckpt").read_bytes()))
    assert runs[0] == runs[1]
    assert len(runs[0][1].decode().splitlines()) == 4


def test_periodic_checkpoints(data, tmp_path):
    tcfg = TrainConfig(batch_size=48, epochs=2, checkpoint_every=1)
    train_backbone(data, tiny_config(), tcfg, ckpt_dir=tmp_path)
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["backbone_epoch0001.ckpt", "backbone_epoch0002.ckpt"]
    assert load_checkpoint(tmp_path / names[-1]).epoch == 2


@pytest.fixture(scope="module")
def trained(data):
    tcfg = TrainConfig(batch_size=32, epochs=1, rater_epochs=2, rater_rollouts=2)
    base = train_backbone(data, tiny_config(), tcfg)
    digest = param_digest(base.backbone)
    full = train_rater(data, base, TINY_RATER, tcfg)
    return base, full, digest


def test_rater_training_freezes_backbone(trained):
    base, full, digest = trained
    assert param_digest(full.backbone) == digest
    assert full.rater.ready
    assert all(p.requires_grad for p in full.backbone.parameters())
    assert len(full.loss_history["rater"]) == 2


def test_rater_needs_backbone(data):
    with pytest.raises(InvalidState):
        train_rater(data, None, TINY_RATER, TrainConfig())


def test_checkpoint_round_trip_bit_exact(trained, data, tmp_path):
    _, full, _ = trained
    path = tmp_path / "full.ckpt"
    save_checkpoint(full, path)
    back = load_checkpoint(path, expect_digest=full.config_digest())
    ctx, a = data.batch(np.arange(6))
    mask = torch.tensor([[1, 0, 1, 1]] * 6)
    with torch.no_grad():
        for m in (full, back):
            m.backbone.eval()
        v0 = full.backbone.velocity(ctx, a, 0.7, mask)
        v1 = back.backbone.velocity(ctx, a, 0.7, mask)
        emb = full.backbone.context_embeddings(ctx)
        p0, p1 = full.rater.score(emb, a), back.rater.score(emb, a)
    assert torch.equal(v0, v1) and torch.equal(p0, p1)
    assert back.rng_state == full.rng_state
    assert back.loss_history == full.loss_history
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(trained, tmp_path):
    base, _, _ = trained
    path = tmp_path / "b.ckpt"
    save_checkpoint(base, path)
    with pytest.raises(DigestMismatch) as info:
        load_checkpoint(path, expect_digest="0" * 64)
    assert info.value.expected == "0" * 64
    raw = path.read_bytes()
    (tmp_path / "v.ckpt").write_bytes(raw[:8] + (99).to_bytes(4, "little") + raw[12:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    (tmp_path / "t.ckpt").write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "m.ckpt").write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(FormatError, match="not an asyncfm"):
        load_checkpoint(tmp_path / "m.ckpt")
    loaded = load_checkpoint(path)
    assert loaded.rater is None and loaded.rater_config is None
