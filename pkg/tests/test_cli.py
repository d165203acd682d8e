from pathlib import Path

import numpy as np
import pytest

from patchscale.cli import main
from patchscale.config import load_config
from patchscale.data import load_dataset
from patchscale.model import build_encoder
from patchscale.persist import load_model

FIXTURES = Path(__file__).parent / "fixtures"
CONFIGS = Path(__file__).parent.parent / "configs"

TINY = """
[model]
preset = desk_scan
image_size = 8
embed_dim = 8
mlp_dim = 16
state_dim = 4
depth = 1

[patch]
patch = 2
grid = 4, 2
p_large = 4
factors = 1, 2
scales = 1, 2

[recipe]
epochs = 1
batch_size = 8
warmup_epochs = 0

[data]
n_train = 16
n_test = 8
size = 8
num_classes = 2
"""


@pytest.fixture
def tiny_config(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def files(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_cost_prints_sequence_lengths(capsys):
    assert main(["cost", "--config", str(CONFIGS / "cost_224.ini")]) == 0
    out = capsys.readouterr().out
    for L in ("196", "784", "3136", "12544", "50176"):
        assert f" {L} " in out


def test_fit_on_planted_fixture(capsys):
    assert main(["fit", str(FIXTURES / "planted_power_law.csv")]) == 0
    assert "b = 0.3\n" in capsys.readouterr().out


def test_train_zero_epochs_checkpoint_equals_init(tiny_config, tmp_path):
    out = tmp_path / "out"
    assert main(["train", "--config", str(tiny_config), "--out", str(out), "--epochs", "0"]) == 0
    ckpt = next(out.glob("model_*.ckpt"))
    model, _ = load_model(ckpt)
    cfg = load_config(tiny_config)
    init = build_encoder(model.cfg, seed=cfg.seeds[0]).state_dict()
    got = model.state_dict()
    assert all(np.array_equal(init[k], got[k]) for k in init)
    h = load_config(tiny_config).with_overrides(epochs=0).config_hash
    assert ckpt.name == f"model_{h}.ckpt"


@pytest.mark.parametrize("cmd", ["train", "scan", "ablate-extend", "ablate-input"])
def test_subcommands_are_byte_reproducible(cmd, tiny_config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main([cmd, "--config", str(tiny_config), "--out", str(d), "--seed", "3"]) == 0
    fa, fb = files(a), files(b)
    assert fa and fa == fb


def test_decoder_gap_and_eval(tmp_path, capsys):
    cfg = tmp_path / "seg.ini"
    cfg.write_text(TINY.replace("num_classes = 2", "num_classes = 3\nkind = segmentation")
                   + "\n[experiment]\ndecoder_dim = 8\n")
    assert main(["decoder-gap", "--config", str(cfg), "--out", str(tmp_path / "g")]) == 0
    assert list((tmp_path / "g").glob("decoder_gap_*.json"))
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "t")]) == 0
    ckpt = next((tmp_path / "t").glob("model_*.ckpt"))
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--config", str(cfg)]) == 0
    assert '"miou"' in capsys.readouterr().out


def test_dry_run_trains_nothing(tiny_config, tmp_path, capsys):
    out = tmp_path / "dry"
    assert main(["scan", "--config", str(tiny_config), "--out", str(out), "--dry-run"]) == 0
    text = capsys.readouterr().out
    assert "config_hash" in text and "GFLOPs" in text
    assert not out.exists()


def test_synth_then_eval_with_container(tiny_config, tmp_path, capsys):
    data = tmp_path / "d.psd"
    assert main(["synth", "--n", "8", "--size", "8", "--num-classes", "2", "--seed", "1", "--out", str(data)]) == 0
    assert len(load_dataset(data)) == 8
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path / "t")]) == 0
    ckpt = next((tmp_path / "t").glob("model_*.ckpt"))
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "e")]) == 0
    assert list((tmp_path / "e").glob("eval_*.json"))


def test_f64_mode(tiny_config, tmp_path):
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path), "--f64"]) == 0
    model, _ = load_model(next(tmp_path.glob("model_*.ckpt")))
    assert model.embed.projection.dtype == np.float64


def test_errors_are_single_categorized_lines(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nembed_dim = 8\nwidth = 3\n")
    assert main(["scan", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error: config: ") and ":3:" in err
    bad.write_text("[patch]\ngrid = 8, 3\n")
    assert main(["scan", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "p=3" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt")]) == 5
    assert capsys.readouterr().err.startswith("error: io: ")
    csv = tmp_path / "r.csv"
    csv.write_text("patch,seq_len,test_loss,top1,miou,flops\n8,16,1.0,0,,0\n")
    assert main(["fit", str(csv)]) == 3
