"""Save and restore whole models: weights plus the config needed to rebuild them."""
from __future__ import annotations

import numpy as np

from .model import EncoderConfig, SegHeadConfig, SegmentationModel, build_encoder, build_segmenter
from .tensor_core import CheckpointError, load_checkpoint, save_checkpoint

_NORM_MEAN = "__norm_mean"
_NORM_STD = "__norm_std"


def save_model(path, model, extra: dict | None = None) -> None:
    seg = isinstance(model, SegmentationModel)
    enc = model.encoder if seg else model
    tensors = model.state_dict()
    tensors[_NORM_MEAN] = np.asarray(enc.norm_mean, dtype=np.float64)
    tensors[_NORM_STD] = np.asarray(enc.norm_std, dtype=np.float64)
    meta = {"encoder": enc.cfg.to_dict(), "config_hash": enc.cfg.config_hash,
            "head": model.head_cfg.__dict__.copy() if seg else None, "extra": extra or {}}
    save_checkpoint(path, tensors, meta)


def load_model(path):
    """Rebuild the model recorded in ``path``; the stored config hash must match the stored config."""
    tensors, meta = load_checkpoint(path)
    try:
        cfg = EncoderConfig(**meta["encoder"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: checkpoint has no usable encoder config ({e})") from None
    if cfg.config_hash != meta.get("config_hash"):
        raise CheckpointError(f"{path}: config hash mismatch, stored {meta.get('config_hash')} "
                              f"but config hashes to {cfg.config_hash}")
    mean = tensors.pop(_NORM_MEAN, None)
    std = tensors.pop(_NORM_STD, None)
    dtype = next(iter(tensors.values())).dtype if tensors else np.float32
    if meta.get("head"):
        model = build_segmenter(cfg, SegHeadConfig(**meta["head"]), dtype=dtype)
    else:
        model = build_encoder(cfg, dtype=dtype)
    model.load_state_dict(tensors)
    if mean is not None:
        model.set_normalization(mean, std)
    model.eval()
    return model, meta.get("extra", {})
