"""Command-line entry point: ``patchscale <subcommand> [options]``.

Failures print one line ``error: <category>: <message>`` to stderr and exit
nonzero.  Every artifact lands under ``--out`` with the config hash in its name.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import scaling
from .config import ConfigParseError, RunConfig, build_datasets, load_config, resolve
from .cost_model import estimate, fixed_length_input_scan, report_json as cost_json, report_text as cost_text
from .data import DataFormatError, load_dataset, save_dataset, synth_classification, synth_segmentation
from .model import SegHeadConfig, build_encoder, build_segmenter
from .persist import load_model, save_model
from .tensor_core import CheckpointError
from .train import TrainingDiverged, evaluate, train_run
from .validation import ConfigError

EXIT_CODES = {"config": 2, "data": 3, "diverged": 4, "io": 5, "checkpoint": 6, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, msg: str):
        self.category = category
        super().__init__(msg)


# ---------------------------------------------------------------- helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else resolve({})
    return cfg.with_overrides(seed=args.seed, epochs=getattr(args, "epochs", None))


def _out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise CliError("io", f"cannot create output directory {out}: {e.strerror}") from None
    return out


def _dtype(args, cfg: RunConfig) -> str:
    return "float64" if args.f64 or cfg.experiment.get("f64") else "float32"


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


def _dry_run(cfg: RunConfig, grid) -> None:
    print(cfg.canonical(), end="")
    print(f"config_hash: {cfg.config_hash}")
    ests = [estimate(cfg.encoder.with_patch(p), cfg.experiment["element_bytes"]) for p in grid]
    print(cost_text(ests), end="")


def _log_dir(cfg: RunConfig, out: Path) -> Path:
    d = out / f"logs_{cfg.config_hash}"
    d.mkdir(exist_ok=True)
    return d


def _is_seg(train) -> bool:
    return train.masks is not None


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> None:
    cfg = _config(args)
    enc = cfg.encoder
    if args.dry_run:
        return _dry_run(cfg, [enc.patch])
    out = _out(args)
    train, test = build_datasets(cfg)
    seed = cfg.seeds[0]
    dtype = np.dtype(_dtype(args, cfg))
    if _is_seg(train):
        model = build_segmenter(enc, cfg.head_config(train.num_classes), seed=seed, dtype=dtype)
    else:
        model = build_encoder(replace(enc, num_classes=train.num_classes), seed=seed, dtype=dtype)
    h = cfg.config_hash
    res = train_run(model, train, cfg.recipe, eval_dataset=test if cfg.recipe.epochs else None,
                    log_path=out / f"train_{h}.jsonl", config_hash=h,
                    record_wall_time=cfg.experiment["timing"], seed=seed)
    save_model(out / f"model_{h}.ckpt", model, {"config_hash": h, "recipe_hash": cfg.recipe.recipe_hash,
                                                "steps": res.steps})
    print(f"wrote {out / f'train_{h}.jsonl'}")
    print(f"wrote {out / f'model_{h}.ckpt'}")
    _write(out / f"config_{h}.json", cfg.canonical())


def cmd_eval(args) -> None:
    try:
        model, extra = load_model(args.checkpoint)
    except FileNotFoundError as e:
        raise CliError("io", f"checkpoint not found: {e.filename}") from None
    if args.data:
        try:
            test = load_dataset(args.data)
        except FileNotFoundError as e:
            raise CliError("io", f"dataset not found: {e.filename}") from None
    else:
        _, test = build_datasets(_config(args))
    enc = model.encoder if hasattr(model, "encoder") else model
    if test.image_size != enc.cfg.image_size:
        raise CliError("data", f"dataset is {test.image_size}px but the model expects {enc.cfg.image_size}px")
    rep = evaluate(model, test)
    text = json.dumps(scaling._clean({"checkpoint_config_hash": enc.cfg.config_hash, **rep.to_dict()}),
                      indent=2, sort_keys=True) + "\n"
    print(text, end="")
    if args.out:
        _write(_out(args) / f"eval_{enc.cfg.config_hash}.json", text)


def cmd_scan(args) -> None:
    cfg = _config(args)
    if args.dry_run:
        return _dry_run(cfg, cfg.grid)
    out = _out(args)
    data = build_datasets(cfg)
    enc = cfg.encoder
    if _is_seg(data[0]):
        raise CliError("config", "scan expects classification data; use decoder-gap for segmentation")
    enc = replace(enc, num_classes=data[0].num_classes)
    curve = scaling.run_patch_scan(enc, cfg.grid, cfg.recipe, data, cfg.seeds, args.jobs or cfg.experiment["jobs"],
                                   _log_dir(cfg, out), _dtype(args, cfg))
    h = cfg.config_hash
    text = scaling.curve_text(curve, f"patch scan {h}  recipe {curve.recipe_hash}")
    print(text, end="")
    _write(out / f"scan_{h}.json", scaling.report_json(curve))
    _write(out / f"scan_{h}.txt", text)
    _write(out / f"scan_{h}.csv", scaling.curve_csv(curve))


def cmd_ablate_extend(args) -> None:
    cfg = _config(args)
    p_large = cfg.p_large or max(cfg.grid)
    if args.dry_run:
        return _dry_run(cfg, [p_large] + [p_large // f for f in cfg.factors if f and p_large % f == 0])
    out = _out(args)
    data = build_datasets(cfg)
    enc = replace(cfg.encoder, num_classes=data[0].num_classes)
    rep = scaling.ablate_sequence_extension(enc, p_large, cfg.factors, cfg.recipe, data, cfg.seeds,
                                            args.jobs or cfg.experiment["jobs"], _log_dir(cfg, out),
                                            _dtype(args, cfg))
    _emit_table(out, f"ablate_extend_{cfg.config_hash}", rep)


def cmd_ablate_input(args) -> None:
    cfg = _config(args)
    if args.dry_run:
        enc = cfg.encoder
        print(cfg.canonical(), end="")
        print(cost_text(fixed_length_input_scan(enc, cfg.scales, cfg.experiment["element_bytes"])), end="")
        return
    out = _out(args)
    data = build_datasets(cfg)
    enc = replace(cfg.encoder, num_classes=data[0].num_classes, image_size=data[0].image_size)
    rep = scaling.ablate_input_size(enc, cfg.scales, cfg.recipe, data, cfg.seeds,
                                    args.jobs or cfg.experiment["jobs"], _log_dir(cfg, out), _dtype(args, cfg))
    _emit_table(out, f"ablate_input_{cfg.config_hash}", rep)


def cmd_decoder_gap(args) -> None:
    cfg = _config(args)
    if args.dry_run:
        return _dry_run(cfg, cfg.grid)
    out = _out(args)
    data = build_datasets(cfg)
    if not _is_seg(data[0]):
        raise CliError("config", "decoder-gap needs segmentation data ([data] kind = segmentation)")
    exp = cfg.experiment
    dec = SegHeadConfig("conv_decoder_proxy", data[0].num_classes, exp["decoder_dim"], exp["decoder_stages"])
    rep = scaling.decoder_gap_scan(cfg.encoder, cfg.grid, cfg.recipe, data, cfg.seeds, dec,
                                   args.jobs or exp["jobs"], _log_dir(cfg, out), _dtype(args, cfg))
    _emit_table(out, f"decoder_gap_{cfg.config_hash}", rep)


def _emit_table(out: Path, stem: str, rep: dict) -> None:
    text = scaling.table_text(rep)
    print(text, end="")
    _write(out / f"{stem}.json", scaling.report_json(rep))
    _write(out / f"{stem}.txt", text)


def cmd_cost(args) -> None:
    cfg = _config(args)
    ests = [estimate(cfg.encoder.with_patch(p), cfg.experiment["element_bytes"]) for p in cfg.grid]
    text = cost_text(ests)
    print(text, end="")
    if args.out:
        out = _out(args)
        _write(out / f"cost_{cfg.config_hash}.txt", text)
        _write(out / f"cost_{cfg.config_hash}.json", cost_json(ests))


def cmd_fit(args) -> None:
    try:
        text = Path(args.records).read_text()
    except OSError as e:
        raise CliError("io", f"cannot read {args.records}: {e.strerror}") from None
    try:
        recs = scaling.read_curve_csv(text)
        fit = scaling.fit_power_law(recs)
    except ValueError as e:
        raise CliError("data", str(e)) from None
    p = [r.patch for r in recs]
    loss = [r.test_loss for r in recs]
    rho = scaling._spearman(p, loss)
    lines = [f"b = {fit.b:.6g}", f"a = {np.exp(fit.log_a):.6g}", f"r2 = {fit.r2:.6g}",
             f"spearman = {rho:.6g}", f"n = {fit.n}"]
    print("\n".join(lines))


def cmd_synth(args) -> None:
    kw = dict(size=args.size, num_classes=args.num_classes, seed=args.seed or 0, split=args.split)
    if args.kind == "classification":
        ds = synth_classification(args.n, **kw)
    else:
        ds = synth_segmentation(args.n, **kw)
    path = Path(args.out)
    if path.suffix == "" or path.is_dir():
        path.mkdir(parents=True, exist_ok=True)
        path = path / f"{args.kind}_n{args.n}_s{args.size}_k{args.num_classes}_seed{args.seed or 0}.psd"
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(path, ds)
    print(f"wrote {path}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patchscale", description="Patch-size scaling experiments for vision encoders")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True, train=True):
        p.add_argument("--config", help="INI run config")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, help="override the seed list with one seed")
        if train:
            p.add_argument("--epochs", type=int, help="override recipe epochs")
            p.add_argument("--jobs", type=int, help="worker processes for (p, seed) runs")
            p.add_argument("--dry-run", action="store_true", help="print resolved config and costs, train nothing")
            p.add_argument("--f64", action="store_true", help="64-bit parameters and activations")
        return p

    common(sub.add_parser("train", help="train one model")).set_defaults(func=cmd_train)
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"), out_required=False, train=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset container; defaults to the config's test split")
    p.set_defaults(func=cmd_eval)
    common(sub.add_parser("scan", help="patch-size sweep with power-law fit")).set_defaults(func=cmd_scan)
    common(sub.add_parser("ablate-extend", help="token interpolation vs patch scaling at matched length")
           ).set_defaults(func=cmd_ablate_extend)
    common(sub.add_parser("ablate-input", help="upsampled inputs at fixed sequence length")
           ).set_defaults(func=cmd_ablate_input)
    common(sub.add_parser("decoder-gap", help="conv decoder vs linear head across patch sizes")
           ).set_defaults(func=cmd_decoder_gap)
    common(sub.add_parser("cost", help="sequence length, parameters, FLOPs and memory"), out_required=False,
           train=False).set_defaults(func=cmd_cost)
    p = sub.add_parser("fit", help="fit loss = a * p^b to a records CSV")
    p.add_argument("records")
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("synth", help="write a synthetic dataset container")
    p.add_argument("--kind", choices=("classification", "segmentation"), default="classification")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True, help="file path or directory")
    p.set_defaults(func=cmd_synth)
    return ap


def _category(e: Exception) -> str:
    if isinstance(e, CliError):
        return e.category
    if isinstance(e, (ConfigParseError, ConfigError)):
        return "config"
    if isinstance(e, TrainingDiverged):
        return "diverged"
    if isinstance(e, CheckpointError):
        return "checkpoint"
    if isinstance(e, DataFormatError):
        return "data"
    if isinstance(e, OSError):
        return "io"
    if isinstance(e, ValueError):
        return "config"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(1):
            args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes one categorized line
        cat = _category(e)
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"error: {cat}: {msg}", file=sys.stderr)
        return EXIT_CODES[cat]
    return 0


if __name__ == "__main__":
    sys.exit(main())
