import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchscale.data import (
    DataFormatError,
    Dataset,
    class_colors,
    load_dataset,
    load_small_binary,
    rasterize,
    resize_bilinear,
    save_dataset,
    synth_classification,
    synth_segmentation,
    write_cifar_binary,
    write_idx,
)


def test_synthetic_classification_is_deterministic_and_balanced():
    a = synth_classification(103, seed=4)
    b = synth_classification(103, seed=4)
    assert a.images.tobytes() == b.images.tobytes()
    assert np.array_equal(a.labels, b.labels)
    counts = np.bincount(a.labels, minlength=4)
    assert counts.max() - counts.min() <= 1
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert synth_classification(10, seed=5).images.tobytes() != synth_classification(10, seed=4).images.tobytes()


def test_degenerate_generator_params():
    with pytest.raises(ValueError):
        synth_classification(10, size=4)
    with pytest.raises(ValueError):
        synth_classification(10, num_classes=1)
    with pytest.raises(ValueError):
        synth_segmentation(0)
    with pytest.raises(ValueError):
        synth_classification(10, scales=(3,))


def test_coarse_block_average_hides_the_class():
    """Class means agree: averaging 8x8 patches leaves no class signal beyond noise."""
    ds = synth_classification(800, seed=0)
    pooled = ds.images.reshape(800, 3, 4, 8, 4, 8).mean(axis=(3, 5)).reshape(800, -1)
    means = np.stack([pooled[ds.labels == k].mean(0) for k in range(4)])
    spread = np.abs(means - means.mean(0)).max()
    stderr = pooled.std(0).max() / np.sqrt(200)
    assert spread < 5 * stderr


def test_segmentation_masks_match_rasterizer_and_are_deterministic():
    a = synth_segmentation(20, seed=3)
    b = synth_segmentation(20, seed=3)
    assert np.array_equal(a.masks, b.masks)
    assert a.masks.max() < a.num_classes
    shape = {"kind": "stroke", "x0": 1.0, "y0": 1.0, "x1": 30.0, "y1": 5.0, "width": 1.0}
    cover = rasterize(shape, 32)
    assert 20 < cover.sum() < 60


def test_segmentation_background_fraction_in_range():
    ds = synth_segmentation(1000, seed=11)
    frac = float((ds.masks == 0).mean())
    assert 0.3 < frac < 0.9


def test_class_colors_background_grey():
    cols = class_colors(4)
    np.testing.assert_allclose(cols[0], 0.5)
    assert cols.shape == (4, 3)


def test_idx_fixture_exact_pixels(tmp_path):
    pixels = np.array([[[0, 255], [128, 1]], [[7, 8], [9, 10]]], dtype=np.uint8)
    labels = np.array([3, 1], dtype=np.uint8)
    write_idx(tmp_path / "img.idx", pixels)
    (tmp_path / "lab.idx").write_bytes(struct.pack(">HBBI", 0, 8, 1, 2) + labels.tobytes())
    ds = load_small_binary(tmp_path / "img.idx", "idx", tmp_path / "lab.idx")
    np.testing.assert_array_equal(ds.images[:, 0], pixels.astype(np.float32) / np.float32(255))
    np.testing.assert_array_equal(ds.labels, [3, 1])


def test_idx_errors_name_offsets(tmp_path):
    p = tmp_path / "bad.idx"
    p.write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(DataFormatError, match="byte 0"):
        load_small_binary(p)
    write_idx(p, np.zeros((2, 3, 3), dtype=np.uint8))
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(DataFormatError, match="expected"):
        load_small_binary(p)


def test_cifar_row_layout_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(3, 3, 32, 32), dtype=np.uint8)
    write_cifar_binary(tmp_path / "c.bin", imgs, [1, 0, 9])
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[0] == 1 and raw[1:1025] == imgs[0, 0].tobytes()
    ds = load_small_binary(tmp_path / "c.bin", "cifar_binary")
    np.testing.assert_array_equal(ds.labels, [1, 0, 9])
    np.testing.assert_array_equal(np.rint(ds.images * 255).astype(np.uint8), imgs)
    (tmp_path / "t.bin").write_bytes(raw[:-5])
    with pytest.raises(DataFormatError, match="expected 9219 bytes, got 9214"):
        load_small_binary(tmp_path / "t.bin", "cifar_binary")


def test_container_round_trip(tmp_path):
    ds = synth_segmentation(5, size=16, seed=1)
    ds.with_normalization_from(ds)
    save_dataset(tmp_path / "d.psd", ds)
    back = load_dataset(tmp_path / "d.psd")
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.masks, ds.masks)
    assert back.seed == 1 and back.num_classes == ds.num_classes
    np.testing.assert_allclose(back.channel_stats()[0], ds.channel_stats()[0])
    (tmp_path / "x.psd").write_bytes(b"nope")
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path / "x.psd")


def test_resize_identity_constant_and_ramp():
    img = np.random.default_rng(0).uniform(size=(3, 5, 5))
    np.testing.assert_array_equal(resize_bilinear(img, 5), img)
    const = np.full((1, 4, 4), 0.3)
    np.testing.assert_allclose(resize_bilinear(const, 9), 0.3)
    ramp = np.tile(np.linspace(0, 1, 4), (1, 4, 1))
    np.testing.assert_allclose(resize_bilinear(ramp, 7)[0, 0], np.linspace(0, 1, 7), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 8), st.integers(1, 3))
def test_upscale_then_sample_knots_recovers_original(n, k):
    img = np.random.default_rng(n).uniform(size=(2, n, n))
    up = resize_bilinear(img, k * (n - 1) + 1)
    np.testing.assert_allclose(up[:, ::k, ::k], img, atol=1e-12)


def test_batches_fixed_permutation_keeps_last_partial():
    ds = synth_classification(10, seed=0)
    a = [y.tolist() for _, y in ds.batches(4, seed=1)]
    b = [y.tolist() for _, y in ds.batches(4, seed=1)]
    assert a == b and [len(x) for x in a] == [4, 4, 2]


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.full((2, 1, 4, 4), 1.5), labels=[0, 1])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 4, 4)), labels=[0])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 4, 4)), masks=np.full((2, 4, 4), 3), num_classes=2)


def test_resized_dataset_masks_nearest():
    ds = synth_segmentation(2, size=8, seed=0)
    up = ds.resized(15)
    assert up.masks.shape == (2, 15, 15)
    np.testing.assert_array_equal(up.masks[:, ::2, ::2], ds.masks)


def nearest_neighbour_top1(**kw):
    tr = synth_classification(2000, size=32, num_classes=4, seed=1, **kw)
    te = synth_classification(500, size=32, num_classes=4, seed=2, split="test", **kw)
    a = tr.images.reshape(len(tr), -1).astype(np.float64)
    b = te.images.reshape(len(te), -1).astype(np.float64)
    d = (b * b).sum(1)[:, None] - 2 * b @ a.T + (a * a).sum(1)[None]
    return float((tr.labels[d.argmin(1)] == te.labels).mean())


@pytest.mark.xfail(strict=True, reason="default classes are texture statistics with no position-locked cue; "
                                       "raw-pixel L2 cannot aggregate them")
def test_nearest_neighbour_oracle_on_defaults():
    assert nearest_neighbour_top1() > 0.9


def test_nearest_neighbour_oracle_with_signature():
    assert nearest_neighbour_top1(signature=0.025) > 0.9
