import json

import pytest

from patchscale.cost_model import (
    block_params_only,
    estimate,
    fixed_length_input_scan,
    report_json,
    report_text,
)
from patchscale.model import get_preset
from patchscale.validation import ConfigError

GRID = (16, 8, 4, 2, 1)


def base(kind="attention"):
    return get_preset("deit_base" if kind == "attention" else "adventurer_base")


@pytest.mark.parametrize("kind", ["attention", "scan"])
def test_sequence_lengths(kind):
    assert [estimate(base(kind).with_patch(p)).seq_len for p in GRID] == [196, 784, 3136, 12544, 50176]


def test_memory_quadruples_per_halving():
    for kind in ("attention", "scan"):
        mem = [estimate(base(kind).with_patch(p)).act_mem_bytes for p in GRID]
        for a, b in zip(mem, mem[1:]):
            assert b / a == pytest.approx(4.0, rel=1e-12)


def test_attention_flops_hand_count():
    cfg = get_preset("desk_attention", image_size=8, patch=2, depth=1, embed_dim=4, mlp_dim=8, num_classes=3)
    L, D, M, K = 16, 4, 8, 3
    expect = 2 * L * 12 * D + 8 * L * D * D + 4 * L * L * D + 4 * L * D * M + 2 * D * K
    e = estimate(cfg)
    assert e.flops_per_image == expect
    assert e.mixer_core_flops == 4 * L * L * D


def test_core_flops_ratio_quadratic_vs_linear():
    att = [estimate(base("attention").with_patch(p)).mixer_core_flops for p in (16, 1)]
    scan = [estimate(base("scan").with_patch(p)).mixer_core_flops for p in (16, 1)]
    assert att[1] / att[0] == 256 ** 2
    assert scan[1] / scan[0] == 256


def test_fixed_length_scan_keeps_L_and_grows_patchify():
    cfg = get_preset("desk_scan", patch=4)
    ests = fixed_length_input_scan(cfg, (1, 2, 4))
    assert len({e.seq_len for e in ests}) == 1
    assert [e.patchify_params // ests[0].patchify_params for e in ests] == [1, 4, 16]
    assert len({block_params_only(e, cfg.with_patch(cfg.patch * s, 32 * s)) for e, s in zip(ests, (1, 2, 4))}) == 1
    with pytest.raises(ConfigError):
        fixed_length_input_scan(cfg, (1.5,))


def test_reports():
    ests = [estimate(base().with_patch(p)) for p in GRID]
    text = report_text(ests)
    assert "50176" in text and "196" in text
    d = json.loads(report_json(ests))
    assert set(d) == {e.config_hash for e in ests}
    with pytest.raises(ConfigError):
        estimate(base(), element_bytes=0)
