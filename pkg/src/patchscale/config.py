"""INI run configs with sections model, patch, recipe, data and experiment.

Every key is optional.  Unknown sections or keys are rejected with the line
they appear on.  The content hash covers the fully resolved config, so
comments, whitespace and key order do not change it.
"""
from __future__ import annotations

import configparser
import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import Dataset, load_dataset, load_small_binary, synth_classification, synth_segmentation
from .model import EncoderConfig, SegHeadConfig, content_hash, get_preset
from .train import Recipe, get_recipe


class ConfigParseError(ValueError):
    def __init__(self, msg: str, line: int | None = None, path=None):
        self.line = line
        where = f"{path or '<config>'}" + (f":{line}" if line else "")
        super().__init__(f"{where}: {msg}")


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    return tuple(int(v) for v in re.split(r"[,\s]+", s.strip()) if v)


def _floats(s: str):
    vals = tuple(float(v) for v in re.split(r"[,\s]+", s.strip()) if v)
    return vals[0] if len(vals) == 1 else vals


def _opt(conv):
    return lambda s: None if s.strip().lower() in ("", "none") else conv(s)


_ENCODER_TYPES = {"mixer_kind": str, "embed_dim": int, "mlp_dim": int, "depth": int, "image_size": int,
                  "channels": int, "num_classes": int, "drop_path_rate": float, "heads": _opt(int),
                  "state_dim": int, "direction": str}
_RECIPE_TYPES = {"base_lr": float, "weight_decay": float, "betas": lambda s: tuple(_floats(s)),
                 "epochs": int, "warmup_epochs": int, "batch_size": int, "label_smoothing": float,
                 "drop_path": float, "schedule": str, "seed": int, "eps": float, "augment": _bool,
                 "layer_decay": _opt(float), "repeated_aug": _bool, "three_augment": _bool,
                 "rand_augment": _opt(str)}

SCHEMA: dict[str, dict] = {
    "model": {"preset": str, **_ENCODER_TYPES},
    "patch": {"patch": int, "grid": _ints, "extend": int, "p_large": int, "factors": _ints,
              "scales": _ints},
    "recipe": {"preset": str, **_RECIPE_TYPES},
    "data": {"kind": str, "n_train": int, "n_test": int, "size": int, "num_classes": int,
             "seed": int, "test_seed": int, "task_seed": int, "texture": _floats, "scales": _ints,
             "signature": float, "noise": float, "distractors": int, "distractor_amp": float,
             "shapes": int, "strokes": int, "path": str, "test_path": str, "labels_path": str,
             "test_labels_path": str, "format": str},
    "experiment": {"seeds": _ints, "jobs": int, "head": str, "decoder_dim": int, "decoder_stages": int,
                   "timing": _bool, "element_bytes": int, "f64": _bool},
}

DATA_DEFAULTS = {"kind": "classification", "n_train": 2000, "n_test": 1000, "size": 32, "num_classes": 4,
                 "seed": 1, "test_seed": 2, "task_seed": 0}
EXPERIMENT_DEFAULTS = {"seeds": (0,), "jobs": 1, "head": "linear", "decoder_dim": 32, "decoder_stages": 2,
                       "timing": False, "element_bytes": 2, "f64": False}
FIXED_NUMERICS = {"layernorm_eps": 1e-6, "token_interp": "bilinear, align corners"}


@dataclass
class RunConfig:
    encoder: EncoderConfig
    recipe: Recipe
    grid: tuple = ()
    p_large: int | None = None
    factors: tuple = (1, 2, 4)
    scales: tuple = (1, 2, 4)
    data: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    source: str | None = None

    def to_dict(self) -> dict:
        return {"model": self.encoder.to_dict(), "recipe": self.recipe.to_dict(),
                "patch": {"grid": list(self.grid), "p_large": self.p_large, "factors": list(self.factors),
                          "scales": list(self.scales)},
                "data": _jsonable(self.data), "experiment": _jsonable(self.experiment)}

    @property
    def config_hash(self) -> str:
        return content_hash(self.to_dict())

    def canonical(self) -> str:
        # constants that are not configurable are listed but kept out of the hash
        return json.dumps({**self.to_dict(), "fixed": FIXED_NUMERICS}, sort_keys=True, indent=2) + "\n"

    @property
    def seeds(self) -> tuple:
        return tuple(self.experiment["seeds"])

    def head_config(self, num_classes: int) -> SegHeadConfig:
        kind = self.experiment["head"]
        kind = "conv_decoder_proxy" if kind in ("decoder", "conv") else kind
        return SegHeadConfig(kind, num_classes, self.experiment["decoder_dim"],
                             self.experiment["decoder_stages"])

    def with_overrides(self, seed: int | None = None, epochs: int | None = None) -> "RunConfig":
        out = replace(self, experiment=dict(self.experiment))
        if seed is not None:
            out.experiment["seeds"] = (int(seed),)
            out.recipe = replace(out.recipe, seed=int(seed))
        if epochs is not None:
            out.recipe = replace(out.recipe, epochs=int(epochs),
                                 warmup_epochs=min(out.recipe.warmup_epochs, int(epochs)))
        return out


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(d.items())}


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line number, for error messages."""
    out, section = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            out[(section, None)] = i
            continue
        m = re.match(r"([^=:\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip().lower()), i)
    return out


def parse_config(text: str, path=None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=str(path or "<config>"))
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigParseError(f"syntax error: {e.errors[0][1].strip() if e.errors else e}", line, path) from None
    except configparser.Error as e:
        raise ConfigParseError(str(e).splitlines()[0], getattr(e, "lineno", None), path) from None
    lines = _key_lines(text)
    raw: dict[str, dict] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigParseError(f"unknown section [{section}]; expected one of {sorted(SCHEMA)}",
                                   lines.get((section, None)), path)
        vals = {}
        for key, value in cp.items(section):
            line = lines.get((section, key))
            conv = SCHEMA[section].get(key)
            if conv is None:
                raise ConfigParseError(f"unknown key {key!r} in [{section}]", line, path)
            try:
                vals[key] = conv(value)
            except ValueError as e:
                raise ConfigParseError(f"bad value for {section}.{key}: {e}", line, path) from None
        raw[section] = vals
    try:
        return resolve(raw, source=str(path) if path else None)
    except (ValueError, TypeError) as e:
        raise ConfigParseError(str(e), None, path) from None


def resolve(raw: dict, source=None) -> RunConfig:
    m = dict(raw.get("model", {}))
    p = dict(raw.get("patch", {}))
    r = dict(raw.get("recipe", {}))
    enc = get_preset(m.pop("preset", "desk_scan"), **m)
    if "patch" in p or "extend" in p:
        enc = enc.with_patch(p.get("patch", enc.patch), extend=p.get("extend", 1))
    recipe = get_recipe(r.pop("preset", "desk"), **r)
    data = {**DATA_DEFAULTS, **raw.get("data", {})}
    data.setdefault("size", enc.image_size)
    exp = {**EXPERIMENT_DEFAULTS, **raw.get("experiment", {})}
    grid = tuple(p.get("grid", (enc.patch,)))
    return RunConfig(enc, recipe, grid, p.get("p_large"), tuple(p.get("factors", (1, 2, 4))),
                     tuple(p.get("scales", (1, 2, 4))), data, exp, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path)


_GEN_KEYS = {"classification": ("texture", "scales", "signature", "noise", "distractors", "distractor_amp"),
             "segmentation": ("texture", "noise", "shapes", "strokes")}


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, test) for the config; test carries the train normalization."""
    d = cfg.data
    kind = d["kind"]
    if kind in _GEN_KEYS:
        gen = synth_classification if kind == "classification" else synth_segmentation
        kw = {k: d[k] for k in _GEN_KEYS[kind] if k in d}
        common = dict(size=d["size"], num_classes=d["num_classes"], task_seed=d["task_seed"], **kw)
        train = gen(d["n_train"], seed=d["seed"], split="train", **common)
        test = gen(d["n_test"], seed=d["test_seed"], split="test", **common)
    elif kind == "file":
        train, test = load_dataset(d["path"]), load_dataset(d["test_path"])
    elif kind in ("idx", "cifar_binary"):
        train = load_small_binary(d["path"], kind, d.get("labels_path"), split="train")
        test = load_small_binary(d["test_path"], kind, d.get("test_labels_path"), split="test")
    else:
        raise ValueError(f"unknown data kind {kind!r}")
    test.with_normalization_from(train)
    return train, test
