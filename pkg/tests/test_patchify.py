import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from patchscale import tensor_core as tc
from patchscale.interp import interp_matrix, knot_positions
from patchscale.patchify import (
    PatchConfig,
    PatchEmbedWeights,
    extend_by_interpolation,
    grid_view,
    image_to_patches,
    patchify_forward,
    pos_embed_resample,
    seq_len,
)
from patchscale.tensor_core import Tensor
from patchscale.validation import ConfigError


@pytest.mark.parametrize("p,L", [(16, 196), (8, 784), (4, 3136), (2, 12544), (1, 50176)])
def test_sequence_length_at_224(p, L):
    assert seq_len(224, p) == L
    assert PatchConfig(224, 224, p, 8).seq_len == L


def test_indivisible_patch_is_rejected():
    with pytest.raises(ConfigError, match="does not divide"):
        PatchConfig(32, 32, 3, 8)
    with pytest.raises(ConfigError):
        seq_len(32, 0)


def test_patch_ordering_is_row_major_with_row_col_channel_inside():
    img = np.arange(2 * 4 * 4, dtype=np.float64).reshape(1, 2, 4, 4)
    patches = image_to_patches(Tensor(img, dtype=np.float64), 2).data[0]
    assert patches.shape == (4, 8)
    # second patch is rows 0-1, cols 2-3
    expect = np.stack([img[0, :, 0:2, 2:4][:, r, c] for r in range(2) for c in range(2)]).reshape(-1)
    np.testing.assert_array_equal(patches[1], expect)


def test_p1_is_a_per_pixel_linear_map():
    cfg = PatchConfig(4, 4, 1, 5, channels=3)
    w = PatchEmbedWeights(cfg).initialize(0, np.float64)
    img = np.random.default_rng(0).uniform(size=(3, 4, 4))
    tok = patchify_forward(Tensor(img, dtype=np.float64), cfg, w).data
    pix = img.reshape(3, 16).T
    np.testing.assert_allclose(tok, pix @ w.projection.data + w.bias.data + w.pos_embed.data)


def test_shape_mismatch_is_an_error():
    cfg = PatchConfig(8, 8, 2, 4)
    w = PatchEmbedWeights(cfg).initialize(0)
    with pytest.raises(ConfigError):
        patchify_forward(np.zeros((3, 16, 16)), cfg, w)


def test_extension_keeps_knots_and_grows_length():
    tokens = np.random.default_rng(1).normal(size=(9, 4))
    out = extend_by_interpolation(tokens, (3, 3), 2)
    assert out.shape == (36, 4)
    g = out.reshape(6, 6, 4)
    src = tokens.reshape(3, 3, 4)
    for j, i in knot_positions(3, 6):
        for jj, ii in knot_positions(3, 6):
            np.testing.assert_allclose(g[i, ii], src[j, jj])


def test_extension_factor_one_is_identity_and_bad_factor_fails():
    tokens = np.ones((4, 2))
    assert extend_by_interpolation(tokens, (2, 2), 1) is tokens
    with pytest.raises(ConfigError):
        extend_by_interpolation(tokens, (2, 2), 0)


def test_pos_embed_resample_round_trip_at_knots():
    pos = np.random.default_rng(2).normal(size=(16, 3))
    up = pos_embed_resample(pos, (4, 4), (7, 7))
    back = up.reshape(7, 7, 3)[::2, ::2].reshape(16, 3)
    np.testing.assert_allclose(back, pos, atol=1e-12)
    with pytest.raises(ConfigError):
        pos_embed_resample(pos[:15], (4, 4), (8, 8))


def test_grid_view_inverts_ordering():
    cfg = PatchConfig(8, 8, 2, 3)
    tokens = np.arange(16 * 3).reshape(16, 3)
    g = grid_view(tokens, cfg)
    np.testing.assert_array_equal(g[1, 2], tokens[1 * 4 + 2])
    with pytest.raises(ConfigError):
        grid_view(tokens[:15], cfg)


def test_interp_matrix_rows_are_convex():
    m = interp_matrix(7, 3)
    np.testing.assert_allclose(m.sum(1), 1.0)
    assert (m >= 0).all()
    assert ((m > 0).sum(1) <= 2).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8))
def test_linear_ramp_is_reproduced_exactly(n_in, n_out):
    ramp = np.linspace(0.0, 1.0, n_in) if n_in > 1 else np.zeros(1)
    out = interp_matrix(n_out, n_in) @ ramp
    expect = np.linspace(0.0, 1.0, n_out) if n_in > 1 and n_out > 1 else np.full(n_out, ramp[0])
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_patchify_gradients():
    cfg = PatchConfig(4, 4, 2, 3, channels=2, extend=2)
    w = PatchEmbedWeights(cfg).initialize(0, np.float64)
    img = Tensor(np.random.default_rng(3).uniform(size=(2, 2, 4, 4)), requires_grad=True, dtype=np.float64)
    errs = tc.check_gradients(lambda: tc.mean(patchify_forward(img, cfg, w) ** 2),
                              {"img": img, **w.named_parameters()})
    assert max(errs.values()) < 1e-6
