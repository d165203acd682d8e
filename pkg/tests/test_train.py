import json

import numpy as np
import pytest

from patchscale.data import synth_blobs, synth_segmentation
from patchscale.model import SegHeadConfig, build_encoder, build_segmenter, get_preset
from patchscale.train import (
    RECIPES,
    Recipe,
    TrainingDiverged,
    confusion_counts,
    evaluate,
    get_recipe,
    lr_at,
    mean_iou,
    train_run,
)


def tiny(kind="scan", patch=2):
    return get_preset(f"desk_{kind}", image_size=8, patch=patch, num_classes=2, embed_dim=8, mlp_dim=16,
                      state_dim=4)


def test_schedule_warmup_peak_and_floor():
    r = get_recipe("desk", epochs=10, warmup_epochs=2, base_lr=1e-3)
    spe = 5
    assert lr_at(0, r, spe) == 0.0
    assert lr_at(5, r, spe) == pytest.approx(0.5e-3)
    assert lr_at(10, r, spe) == pytest.approx(1e-3)
    assert lr_at(49, r, spe) == pytest.approx(1e-9, rel=1e-9)
    lrs = [lr_at(s, r, spe) for s in range(10, 50)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_recipe_hash_and_round_trip():
    r = RECIPES["pretrain"]
    assert Recipe.from_dict(r.to_dict()) == r
    assert r.recipe_hash == Recipe.from_dict(r.to_dict()).recipe_hash
    assert r.recipe_hash != get_recipe("pretrain", seed=1).recipe_hash
    with pytest.raises(ValueError, match="unknown recipe fields"):
        Recipe.from_dict({"lr": 1})
    with pytest.raises(ValueError):
        get_recipe("desk", warmup_epochs=20, epochs=3)


def test_appendix_recipes_are_stored_verbatim():
    r = RECIPES["pretrain_large"]
    assert (r.base_lr, r.weight_decay, r.epochs, r.betas, r.batch_size, r.warmup_epochs, r.drop_path) == \
        (2e-4, 0.3, 200, (0.9, 0.95), 4096, 20, 0.2)
    assert RECIPES["finetune_large"].layer_decay == 0.95


def test_training_learns_separable_blobs():
    tr, te = synth_blobs(64, seed=0), synth_blobs(32, seed=1, split="test")
    te.with_normalization_from(tr)
    m = build_encoder(tiny(), seed=0)
    res = train_run(m, tr, get_recipe("desk", epochs=3, batch_size=16, warmup_epochs=0), eval_dataset=te)
    assert res.log[-1]["top1"] == 1.0
    assert res.steps == 12
    assert list(res.log[0]) == ["epoch", "train_loss", "lr", "test_loss", "top1", "wall_s", "config_hash"]


def test_logs_are_byte_identical_without_timing(tmp_path):
    tr = synth_blobs(32, seed=0)
    rec = get_recipe("desk", epochs=2, batch_size=8, warmup_epochs=1, drop_path=0.1, augment=True)
    for name in ("a", "b"):
        train_run(build_encoder(tiny("attention"), seed=1), tr, rec, eval_dataset=tr,
                  log_path=tmp_path / f"{name}.jsonl", record_wall_time=False)
    a = (tmp_path / "a.jsonl").read_bytes()
    assert a == (tmp_path / "b.jsonl").read_bytes()
    rows = [json.loads(x) for x in a.decode().splitlines()]
    assert [r["wall_s"] for r in rows] == [0.0, 0.0]


def test_run_seed_changes_shuffling():
    tr = synth_blobs(32, seed=0)
    rec = get_recipe("desk", epochs=1, batch_size=8, warmup_epochs=0)
    a = train_run(build_encoder(tiny(), seed=0), tr, rec, seed=0).log[0]["train_loss"]
    b = train_run(build_encoder(tiny(), seed=0), tr, rec, seed=5).log[0]["train_loss"]
    assert a != b


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported_with_step():
    tr = synth_blobs(16, seed=0)
    rec = get_recipe("desk", epochs=3, batch_size=8, warmup_epochs=0, base_lr=1e30)
    with pytest.raises(TrainingDiverged) as ei:
        train_run(build_encoder(tiny("attention"), seed=0), tr, rec)
    assert ei.value.step >= 1
    assert "non-finite loss" in str(ei.value)


def test_mean_iou_over_present_classes():
    target = np.array([0, 0, 1, 1])
    pred = np.array([0, 1, 1, 1])
    conf = confusion_counts(pred, target, 3)
    # class 0: 1/2, class 1: 2/3; class 2 absent from ground truth
    assert mean_iou(conf) == pytest.approx((0.5 + 2 / 3) / 2)


def test_segmentation_training_and_eval_report():
    ds = synth_segmentation(8, size=8, num_classes=3, seed=0)
    m = build_segmenter(tiny(patch=2), SegHeadConfig("linear", 3), seed=0)
    res = train_run(m, ds, get_recipe("desk", epochs=1, batch_size=4, warmup_epochs=0), eval_dataset=ds)
    assert "miou" in res.log[-1]
    rep = evaluate(m, ds)
    assert 0.0 <= rep.miou <= 1.0 and rep.samples == 8


def test_zero_epochs_leaves_weights_untouched():
    m = build_encoder(tiny(), seed=2)
    before = m.state_dict()
    res = train_run(m, synth_blobs(8), get_recipe("desk", epochs=0, warmup_epochs=0))
    assert res.log == [] and res.steps == 0
    after = m.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
