import numpy as np
import pytest

from patchscale import tensor_core as tc
from patchscale.mixers import (
    AttentionParams,
    Block,
    BlockConfig,
    ScanParams,
    attention_forward,
    block_forward,
    count_ops,
    linear_scan,
    mlp_forward,
    scan_forward,
)
from patchscale.tensor_core import Tensor
from patchscale.validation import ConfigError


def tokens(L, D=8, seed=0, B=None):
    shape = (L, D) if B is None else (B, L, D)
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=True, dtype=np.float64)


def test_attention_is_permutation_equivariant():
    p = AttentionParams(8, 2).initialize(0, np.float64)
    x = tokens(7)
    perm = np.random.default_rng(1).permutation(7)
    y = attention_forward(x, p).data
    yp = attention_forward(Tensor(x.data[perm], dtype=np.float64), p).data
    np.testing.assert_allclose(yp, y[perm], atol=1e-12)


def test_forward_scan_is_causal():
    p = ScanParams(8, 4, "forward").initialize(0, np.float64)
    x = tokens(10)
    y = scan_forward(x, p).data
    x2 = x.data.copy()
    x2[6] += 1.0
    y2 = scan_forward(Tensor(x2, dtype=np.float64), p).data
    np.testing.assert_array_equal(y2[:6], y[:6])
    assert np.abs(y2[6:] - y[6:]).max() > 0


def test_bidirectional_scan_sees_both_sides():
    p = ScanParams(8, 4).initialize(0, np.float64)
    x = tokens(10)
    y = scan_forward(x, p).data
    x2 = x.data.copy()
    x2[6] += 1.0
    y2 = scan_forward(Tensor(x2, dtype=np.float64), p).data
    assert np.abs(y2[:6] - y[:6]).max() > 0


def test_linear_scan_matches_loop_and_reverse():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, size=(2, 6, 3))
    x = rng.normal(size=(2, 6, 3))
    h = np.zeros((2, 3))
    ref = []
    for t in range(6):
        h = a[:, t] * h + x[:, t]
        ref.append(h)
    out = linear_scan(Tensor(a, dtype=np.float64), Tensor(x, dtype=np.float64)).data
    np.testing.assert_allclose(out, np.stack(ref, 1))
    rev = linear_scan(Tensor(a[:, ::-1], dtype=np.float64), Tensor(x[:, ::-1], dtype=np.float64), reverse=True).data
    np.testing.assert_allclose(rev[:, ::-1], out)


def test_scan_and_attention_gradients():
    for p in (AttentionParams(4, 2), ScanParams(4, 3)):
        p.initialize(0, np.float64)
        x = tokens(5, 4, B=2)
        fwd = attention_forward if isinstance(p, AttentionParams) else scan_forward
        errs = tc.check_gradients(lambda: tc.mean(fwd(x, p) ** 2), {"x": x, **p.named_parameters()})
        assert max(errs.values()) < 1e-5


def test_op_counters_scale_with_length():
    att = AttentionParams(8, 2).initialize(0)
    scan = ScanParams(8, 4).initialize(0)
    counts = {}
    for L in (16, 64):
        with count_ops() as c:
            attention_forward(tokens(L), att)
            scan_forward(tokens(L), scan)
            counts[L] = dict(c)
    assert counts[64]["attention_score"] == 16 * counts[16]["attention_score"]
    assert counts[64]["scan"] == 4 * counts[16]["scan"]


def test_mlp_shape_checks():
    x = tokens(3, 4)
    w1 = Tensor(np.ones((4, 6)))
    with pytest.raises(ValueError, match="mismatch"):
        mlp_forward(x, w1, Tensor(np.ones((5, 4))))


def test_block_config_errors():
    with pytest.raises(ConfigError):
        BlockConfig("conv", 8, 16)
    with pytest.raises(ConfigError):
        BlockConfig("attention", 8, 16, heads=3)
    with pytest.raises(ConfigError):
        BlockConfig("scan", 8, 16, direction="sideways")


def test_block_rejects_mismatched_params():
    blk = Block(BlockConfig("scan", 8, 16, state_dim=4)).initialize(0)
    with pytest.raises(ConfigError):
        block_forward(tokens(3), BlockConfig("attention", 8, 16), blk)


def test_drop_path_is_identity_in_eval_and_zeroes_samples_in_train():
    blk = Block(BlockConfig("attention", 8, 16, drop_path_rate=0.99)).initialize(0, np.float64)
    x = tokens(4, B=8)
    ev = block_forward(x, blk.cfg, blk, training=False).data
    ref = block_forward(x, BlockConfig("attention", 8, 16), blk, training=False).data
    np.testing.assert_allclose(ev, ref)
    tr = block_forward(x, blk.cfg, blk, np.random.default_rng(0), training=True).data
    unchanged = [np.allclose(tr[i], x.data[i]) for i in range(8)]
    assert sum(unchanged) >= 6
