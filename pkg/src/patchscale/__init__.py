"""Patch-size scaling laboratory for plain vision encoders."""
from .model import (
    PRESETS,
    EncoderConfig,
    SegHeadConfig,
    build_encoder,
    build_segmenter,
    count_params,
    forward_classify,
    forward_dense,
    get_preset,
)
from .patchify import PatchConfig

__version__ = "0.1.0"
