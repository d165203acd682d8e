import json

import numpy as np
import pytest

from patchscale.data import synth_blobs, synth_segmentation
from patchscale.model import get_preset
from patchscale.scaling import (
    INSUFFICIENT,
    RunRecord,
    ablate_input_size,
    ablate_sequence_extension,
    assemble_curve,
    curve_csv,
    curve_text,
    decoder_gap_scan,
    fit_power_law,
    read_curve_csv,
    report_json,
    run_patch_scan,
)
from patchscale.train import get_recipe
from patchscale.validation import ConfigError


def rec(p, loss, seed=0, recipe="r"):
    return RunRecord(p, (32 // p) ** 2, loss, 0.5, None, 100, seed, "c", recipe)


def test_exact_recovery_on_planted_curve():
    p = np.array([16, 8, 4, 2, 1])
    fit = fit_power_law(list(zip(p, 2.5 * p ** 0.3)))
    assert abs(fit.b - 0.3) < 1e-9
    assert fit.r2 == 1.0
    assert fit.log_a == pytest.approx(np.log(2.5), abs=1e-12)


def test_noisy_recovery_within_tolerance():
    p = np.array([16, 8, 4, 2, 1], dtype=float)
    rng = np.random.default_rng(0)
    bs = [fit_power_law(list(zip(p, 3 * p ** 0.25 * (1 + 0.01 * rng.normal(size=5))))).b for _ in range(100)]
    assert max(abs(b - 0.25) for b in bs) < 0.05


def test_fit_edge_cases():
    flat = fit_power_law([(8, 1.0), (4, 1.0), (2, 1.0)])
    assert flat.b == 0.0 and flat.r2 == 1.0
    with pytest.raises(ValueError, match=INSUFFICIENT):
        fit_power_law([(8, 1.0), (4, 0.5)])
    with pytest.raises(ValueError, match="positive"):
        fit_power_law([(8, 1.0), (4, 0.0), (2, 0.5)])
    with pytest.raises(ValueError, match=INSUFFICIENT):
        fit_power_law([(4, 1.0), (4, 0.9), (4, 0.8)])


def test_assemble_averages_seeds_and_sorts():
    runs = [rec(p, loss, s) for p, base in ((2, 0.5), (8, 1.5), (4, 1.0)) for s, loss in enumerate((base, base + 0.2))]
    curve = assemble_curve(runs)
    assert [r.patch for r in curve.records] == [8, 4, 2]
    assert [r.test_loss for r in curve.records] == pytest.approx([1.6, 1.1, 0.6])
    assert curve.spearman == pytest.approx(1.0)
    assert curve.fit.n == 3


def test_assemble_marks_short_curves_and_rejects_mixed_recipes():
    assert assemble_curve([rec(8, 1.0), rec(4, 0.5)]).status == INSUFFICIENT
    with pytest.raises(AssertionError, match="share a recipe"):
        assemble_curve([rec(8, 1.0, recipe="a"), rec(4, 0.5, recipe="b")])


def test_csv_round_trip_and_text():
    curve = assemble_curve([rec(8, 1.2), rec(4, 0.9), rec(2, 0.7)])
    text = curve_csv(curve)
    assert text.splitlines()[0] == "patch,seq_len,test_loss,top1,miou,flops"
    back = read_curve_csv(text)
    assert [(r.patch, r.test_loss) for r in back] == [(8, 1.2), (4, 0.9), (2, 0.7)]
    assert "r2" in curve_text(curve)
    json.loads(report_json(curve))
    with pytest.raises(ValueError, match="missing columns"):
        read_curve_csv("patch,loss\n1,2\n")


def tiny_cfg(kind="scan"):
    return get_preset(f"desk_{kind}", image_size=8, patch=2, num_classes=2, embed_dim=8, mlp_dim=16, state_dim=4)


def blobs():
    tr, te = synth_blobs(32, seed=0), synth_blobs(16, seed=1, split="test")
    te.with_normalization_from(tr)
    return tr, te


def test_patch_scan_end_to_end_one_recipe():
    recipe = get_recipe("desk", epochs=1, batch_size=16, warmup_epochs=0)
    curve = run_patch_scan(tiny_cfg(), [8, 4, 2], recipe, blobs(), seeds=(0, 1))
    assert len(curve.runs) == 6
    assert {r.recipe_hash for r in curve.runs} == {recipe.recipe_hash}
    assert [r.seq_len for r in curve.records] == [1, 4, 16]


def test_patch_scan_validates_grid_before_training():
    with pytest.raises(ConfigError, match="p=3"):
        run_patch_scan(tiny_cfg(), [8, 3], get_recipe("desk"), blobs())


def test_parallel_scan_matches_serial():
    recipe = get_recipe("desk", epochs=1, batch_size=16, warmup_epochs=0)
    a = run_patch_scan(tiny_cfg(), [4, 2], recipe, blobs(), seeds=(0,))
    b = run_patch_scan(tiny_cfg(), [4, 2], recipe, blobs(), seeds=(0,), n_jobs=2)
    assert [r.to_dict() for r in a.runs] == [r.to_dict() for r in b.runs]


def test_extension_ablation_pairs_lengths():
    recipe = get_recipe("desk", epochs=1, batch_size=16, warmup_epochs=0)
    rep = ablate_sequence_extension(tiny_cfg(), 4, (1, 2), recipe, blobs())
    assert [r["seq_len"] for r in rep["rows"]] == [4, 16]
    assert rep["rows"][0]["extend_gain"] == 0.0 and rep["rows"][0]["scale_gain"] == 0.0
    with pytest.raises(ConfigError):
        ablate_sequence_extension(tiny_cfg(), 4, (3,), recipe, blobs())


def test_input_size_ablation_fixed_length():
    recipe = get_recipe("desk", epochs=1, batch_size=16, warmup_epochs=0)
    rep = ablate_input_size(tiny_cfg(), (1, 2), recipe, blobs())
    rows = rep["rows"]
    assert [r["seq_len"] for r in rows] == [16, 16]
    assert [r["patchify_ratio"] for r in rows] == [1.0, 4.0]
    assert rows[1]["beyond_native"] and not rows[0]["beyond_native"]


def test_decoder_gap_scan_reports_gap_per_p():
    tr = synth_segmentation(8, size=8, num_classes=3, seed=0)
    te = synth_segmentation(4, size=8, num_classes=3, seed=1)
    te.with_normalization_from(tr)
    recipe = get_recipe("desk", epochs=1, batch_size=4, warmup_epochs=0)
    rep = decoder_gap_scan(tiny_cfg(), [4, 2], recipe, (tr, te), seeds=(0,))
    assert [r["patch"] for r in rep["rows"]] == [4, 2]
    for r in rep["rows"]:
        assert r["gap"] == pytest.approx(r["miou_decoder"] - r["miou_linear"])
    with pytest.raises(ConfigError, match="masks"):
        decoder_gap_scan(tiny_cfg(), [2], recipe, blobs())
