import numpy as np
import pytest
import torch

from asyncfm.bench import CorruptionSpec, TaskSpec, gen_dataset
from asyncfm.evaluation import data_efficiency_eval, evaluate, self_correction_eval, stage_timings
from asyncfm.rater import RaterConfig
from asyncfm.training import TrainConfig, train_backbone, train_rater

from conftest import tiny_config

SPEC = TaskSpec(num_tasks=3, L=4, D=3, S=3, d_in=5)


@pytest.fixture(scope="module")
def models():
    data = gen_dataset(SPEC, 64, "train")
    tcfg = TrainConfig(batch_size=32, epochs=1, rater_epochs=1, rater_rollouts=1)
    full = train_rater(data, train_backbone(data, tiny_config(), tcfg),
                       RaterConfig(layers=1, heads=2, ffn=16, d_r=16), tcfg)
    return full, gen_dataset(SPEC, 40, "test")


def test_evaluate_metrics_consistent(models):
    full, test = models
    rep = evaluate(full.backbone, full.rater, test, "async", batch_size=16)
    per_token = [rep[f"token_mse_{l}"] for l in range(4)]
    assert abs(rep["chunk_mse"] - np.mean(per_token)) <= 1e-6
    assert 0 <= rep["success_rate"] <= 1 and 0 <= rep["mask_rate"] <= 1
    again = evaluate(full.backbone, full.rater, test, "async", batch_size=16)
    assert rep.to_text() == again.to_text()


def test_self_correction_structure(models):
    full, test = models
    rep = self_correction_eval(full.backbone, full.rater, test, CorruptionSpec(), batch_size=16)
    assert rep["oracle.detection_rate"] == 1.0 and rep["oracle.false_mask_rate"] == 0.0
    assert rep["sfm_only.corrupted_token_mse_after"] == rep["corrupted_token_mse_before"]
    assert rep["sfm_only.mask_cardinality"] == 0.0
    for key in ("sfm_only", "random_mask", "async", "oracle"):
        assert 0 <= rep[f"{key}.success_rate"] <= 1
    table = rep.columns_text("per_token").splitlines()
    assert table[0].split("\t")[:3] == ["token", "sfm", "corrupted"] and len(table) == 5


def test_self_correction_scale_zero_near_noop(models):
    full, test = models
    rep = self_correction_eval(full.backbone, full.rater, test, CorruptionSpec(scale=0.0), batch_size=16)
    # nothing was perturbed, so the regenerated set is just the rater's usual picks
    card = rep["async.mask_cardinality"]
    expect = rep["async.false_mask_rate"] * 3 + rep["async.detection_rate"]
    assert abs(card - expect) <= 1e-6


def test_stage_timings(models):
    full, test = models
    t = stage_timings(full.backbone, full.rater, test, episodes=5)
    assert t["timed_episodes"] == 5
    assert abs(t["time_share_sfm"] + t["time_share_rater"] + t["time_share_afm"] - 1) <= 1e-9


def test_data_efficiency_seed_matched():
    seen = []
    res = data_efficiency_eval(SPEC, [0.5], 2, seeds=(0,), backbone_config=tiny_config(),
                               train_config=TrainConfig(batch_size=16), n_train=64, n_heldout=16,
                               on_epoch=lambda *a: seen.append(a[:4]))
    curves = res[(0.5, 0)]
    assert set(curves) == {"unified", "all-one"}
    for v in curves.values():
        assert all(len(v[k]) == 2 for k in ("train", "heldout_masked", "heldout_sfm"))
    assert curves["unified"]["train"] != curves["all-one"]["train"]
    assert len(seen) == 4
