"""Encoder assembly, presets, classification and decoder-free dense prediction."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor_core as tc
from .interp import interp_matrix
from .mixers import Block, BlockConfig, block_forward
from .nn import Module
from .patchify import PatchConfig, PatchEmbedWeights, grid_view, patchify_forward
from .tensor_core import Tensor
from .validation import ConfigError


@dataclass(frozen=True)
class EncoderConfig:
    name: str
    mixer_kind: str
    embed_dim: int
    mlp_dim: int
    depth: int
    image_size: int = 224
    patch: int = 16
    channels: int = 3
    num_classes: int = 1000
    drop_path_rate: float = 0.0
    heads: int | None = None
    state_dim: int = 64
    direction: str = "bidirectional"
    extend: int = 1

    def __post_init__(self):
        if self.mixer_kind not in ("attention", "scan"):
            raise ConfigError(f"mixer_kind must be 'attention' or 'scan', got {self.mixer_kind!r}")
        if self.embed_dim < 1 or self.mlp_dim < 1 or self.depth < 0 or self.num_classes < 0:
            raise ConfigError(f"invalid dims: D={self.embed_dim}, mlp={self.mlp_dim}, depth={self.depth}")
        if self.embed_dim % self.n_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.n_heads}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ConfigError(f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}")
        self.patch_config  # validates geometry

    @property
    def n_heads(self) -> int:
        # 64-wide heads (3/6/12/16/20 for Tiny..Huge) when unspecified
        return self.heads if self.heads is not None else max(1, self.embed_dim // 64)

    @property
    def patch_config(self) -> PatchConfig:
        return PatchConfig(self.image_size, self.image_size, self.patch, self.embed_dim,
                           self.channels, self.extend)

    @property
    def seq_len(self) -> int:
        return self.patch_config.seq_len

    @property
    def cls_index(self) -> int:
        # scan mixers see CLS last so the forward state has read every token
        return -1 if self.mixer_kind == "scan" else 0

    def block_config(self, index: int = 0) -> BlockConfig:
        rate = self.drop_path_rate * index / max(self.depth - 1, 1)
        return BlockConfig(self.mixer_kind, self.embed_dim, self.mlp_dim, rate,
                           self.n_heads, self.state_dim, self.direction)

    def with_patch(self, patch: int, image_size: int | None = None, extend: int = 1) -> "EncoderConfig":
        return replace(self, patch=patch, image_size=image_size or self.image_size, extend=extend)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def config_hash(self) -> str:
        return content_hash(self.to_dict())


def content_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _preset(name, kind, D, mlp, depth, **kw) -> EncoderConfig:
    return EncoderConfig(name=name, mixer_kind=kind, embed_dim=D, mlp_dim=mlp, depth=depth, **kw)


PRESETS: dict[str, EncoderConfig] = {
    "deit_tiny": _preset("deit_tiny", "attention", 192, 768, 12),
    "deit_small": _preset("deit_small", "attention", 384, 1536, 12),
    "deit_base": _preset("deit_base", "attention", 768, 3072, 12),
    "deit_large": _preset("deit_large", "attention", 1024, 4096, 24),
    "deit_huge": _preset("deit_huge", "attention", 1280, 5120, 32),
    "adventurer_tiny": _preset("adventurer_tiny", "scan", 256, 640, 12),
    "adventurer_small": _preset("adventurer_small", "scan", 512, 1280, 12),
    "adventurer_base": _preset("adventurer_base", "scan", 768, 1920, 12),
    "adventurer_large": _preset("adventurer_large", "scan", 1024, 2560, 24),
    "adventurer_huge": _preset("adventurer_huge", "scan", 1280, 3200, 32),
    # desk scale
    "desk_attention": _preset("desk_attention", "attention", 8, 32, 2, image_size=32, patch=4,
                              num_classes=4, heads=1),
    "desk_scan": _preset("desk_scan", "scan", 8, 32, 2, image_size=32, patch=4, num_classes=4,
                         state_dim=16),
}


def get_preset(name: str, **overrides) -> EncoderConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------- encoder

class Encoder(Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = self.child("embed", PatchEmbedWeights(cfg.patch_config))
        self.blocks = [self.child(f"blocks.{i}", Block(cfg.block_config(i))) for i in range(cfg.depth)]
        D = cfg.embed_dim
        self.norm_g = self.param("norm_g", (D,), ("ones",), decay=False)
        self.norm_b = self.param("norm_b", (D,), ("zeros",), decay=False)
        if cfg.num_classes:
            self.head_w = self.param("head_w", (D, cfg.num_classes))
            self.head_b = self.param("head_b", (cfg.num_classes,), ("zeros",), decay=False)
        self.norm_mean = np.zeros(cfg.channels)
        self.norm_std = np.ones(cfg.channels)

    def set_normalization(self, mean, std) -> None:
        self.norm_mean = np.asarray(mean, dtype=np.float64).reshape(self.cfg.channels)
        self.norm_std = np.asarray(std, dtype=np.float64).reshape(self.cfg.channels)

    def normalize(self, images) -> Tensor:
        if isinstance(images, Tensor):
            mean = self.norm_mean.reshape(-1, 1, 1).astype(images.dtype)
            std = self.norm_std.reshape(-1, 1, 1).astype(images.dtype)
            if np.all(mean == 0) and np.all(std == 1):
                return images
            C, H, W = images.shape[-3:]
            return (images - np.broadcast_to(mean, (C, H, W))) / np.broadcast_to(std, (C, H, W))
        x = np.asarray(images)
        dtype = self.embed.projection.dtype
        return Tensor((x - self.norm_mean.reshape(-1, 1, 1)) / self.norm_std.reshape(-1, 1, 1), dtype=dtype)

    def forward_features(self, images, rng: np.random.Generator | None = None) -> Tensor:
        """Final-norm token features [B, L+1, D] including CLS at ``cfg.cls_index``."""
        cfg = self.cfg
        x = self.normalize(images)
        if x.ndim == 3:
            x = tc.reshape(x, (1,) + x.shape)
        if x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ConfigError(f"image shape {x.shape[1:]} does not match model input "
                              f"{(cfg.channels, cfg.image_size, cfg.image_size)}; no silent resizing")
        tokens = patchify_forward(x, cfg.patch_config, self.embed)
        B, L, D = tokens.shape
        cls = Tensor(np.zeros((B, 1, D)), dtype=tokens.dtype) + self.embed.cls_token
        parts = [tokens, cls] if cfg.cls_index == -1 else [cls, tokens]
        x = tc.concat(parts, axis=1)
        for i, blk in enumerate(self.blocks):
            x = block_forward(x, blk.cfg, blk, rng, self.training)
        return tc.layernorm(x, self.norm_g, self.norm_b, 1e-6)

    def spatial_features(self, images, rng=None) -> Tensor:
        feats = self.forward_features(images, rng)
        L = self.cfg.seq_len
        return feats[:, :L] if self.cfg.cls_index == -1 else feats[:, 1:]

    def __call__(self, images, rng=None) -> Tensor:
        return forward_classify(self, images, rng)


def build_encoder(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> Encoder:
    """Deterministic construction: every parameter is drawn from a stream keyed by (seed, name)."""
    return Encoder(cfg).initialize(seed, dtype)


def forward_classify(model: Encoder, images, rng=None) -> Tensor:
    """Logits [B, num_classes] from the final-norm CLS representation."""
    if not model.cfg.num_classes:
        raise ConfigError("model has no classification head (num_classes=0)")
    feats = model.forward_features(images, rng)
    cls = feats[:, model.cfg.cls_index]
    return tc.linear(cls, model.head_w, model.head_b)


# ---------------------------------------------------------------- dense prediction

@dataclass(frozen=True)
class SegHeadConfig:
    """``linear``: one [D, K] projection.  ``conv_decoder_proxy``: ``stages`` rounds of
    3x3 conv, layernorm, GELU and learned 2x upsampling, then the same projection.
    With ``stages=0`` the proxy is exactly the linear head."""

    kind: str
    num_classes: int
    decoder_dim: int = 32
    stages: int = 2

    def __post_init__(self):
        if self.kind not in ("linear", "conv_decoder_proxy"):
            raise ConfigError(f"head kind must be 'linear' or 'conv_decoder_proxy', got {self.kind!r}")
        if self.num_classes < 1 or self.stages < 0 or self.decoder_dim < 1:
            raise ConfigError(f"invalid head config {self}")


class SegHead(Module):
    """``upsamples`` caps how many stages double the grid (none once it reaches the image)."""

    def __init__(self, cfg: SegHeadConfig, embed_dim: int, upsamples: int | None = None):
        super().__init__()
        self.cfg = cfg
        stages = cfg.stages if cfg.kind == "conv_decoder_proxy" else 0
        self.n_stages = stages
        self.n_up = stages if upsamples is None else min(stages, upsamples)
        c_in = embed_dim
        for i in range(stages):
            c = cfg.decoder_dim
            self.param(f"stage{i}.conv_w", (9 * c_in, c))
            self.param(f"stage{i}.conv_b", (c,), ("zeros",), decay=False)
            self.param(f"stage{i}.ln_g", (c,), ("ones",), decay=False)
            self.param(f"stage{i}.ln_b", (c,), ("zeros",), decay=False)
            if i < self.n_up:
                self.param(f"stage{i}.up_w", (c, 4 * c))
                self.param(f"stage{i}.up_b", (4 * c,), ("zeros",), decay=False)
            c_in = c
        self.proj = self.param("proj", (c_in, cfg.num_classes))
        self.proj_b = self.param("proj_b", (cfg.num_classes,), ("zeros",), decay=False)


def _upsample2x(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    B, H, W, _ = x.shape
    C = w.shape[1] // 4
    y = tc.reshape(tc.linear(x, w, b), (B, H, W, 2, 2, C))
    y = tc.transpose(y, (0, 1, 3, 2, 4, 5))
    return tc.reshape(y, (B, 2 * H, 2 * W, C))


def seg_head_forward(grid: Tensor, head: SegHead, out_size: int) -> Tensor:
    """grid [B, g, g, D] -> per-pixel logits [B, K, H, W]."""
    x = grid
    P = head._params
    for i in range(head.n_stages):
        x = tc.linear(tc.unfold3x3(x), P[f"stage{i}.conv_w"], P[f"stage{i}.conv_b"])
        x = tc.gelu(tc.layernorm(x, P[f"stage{i}.ln_g"], P[f"stage{i}.ln_b"], 1e-6))
        if i < head.n_up:
            x = _upsample2x(x, P[f"stage{i}.up_w"], P[f"stage{i}.up_b"])
    logits = tc.linear(x, head.proj, head.proj_b)
    g = logits.shape[1]
    if g != out_size:
        m = interp_matrix(out_size, g)
        logits = tc.grid_resample(logits, m, m)
    return tc.transpose(logits, (0, 3, 1, 2))


class SegmentationModel(Module):
    def __init__(self, enc_cfg: EncoderConfig, head_cfg: SegHeadConfig):
        super().__init__()
        enc_cfg = replace(enc_cfg, num_classes=0)
        self.cfg = enc_cfg
        self.head_cfg = head_cfg
        self.encoder = self.child("encoder", Encoder(enc_cfg))
        g = enc_cfg.patch_config.grid[0]
        ups = 0
        while g * 2 ** ups < enc_cfg.image_size:
            ups += 1
        self.head = self.child("head", SegHead(head_cfg, enc_cfg.embed_dim, ups))

    def set_normalization(self, mean, std) -> None:
        self.encoder.set_normalization(mean, std)

    def __call__(self, images, rng=None) -> Tensor:
        return forward_dense(self.encoder, images, self.head, rng)


def build_segmenter(cfg: EncoderConfig, head_cfg: SegHeadConfig, seed: int = 0,
                    dtype=np.float32) -> SegmentationModel:
    return SegmentationModel(cfg, head_cfg).initialize(seed, dtype)


def forward_dense(model: Encoder, images, head: SegHead, rng=None) -> Tensor:
    """Per-pixel class logits [B, K, H, W]; CLS is excluded from the dense features."""
    if head.cfg.num_classes != head.proj.shape[1]:
        raise ConfigError("head/class mismatch")
    if head.proj.shape[0] != (head.cfg.decoder_dim if head.n_stages else model.cfg.embed_dim):
        raise ConfigError(f"head expects {head.proj.shape[0]} features, encoder gives {model.cfg.embed_dim}")
    feats = model.spatial_features(images, rng)
    grid = grid_view(feats, model.cfg.patch_config)
    return seg_head_forward(grid, head, model.cfg.image_size)


# ---------------------------------------------------------------- parameter accounting

def mixer_params(cfg: EncoderConfig) -> int:
    D, S = cfg.embed_dim, cfg.state_dim
    if cfg.mixer_kind == "attention":
        return 4 * D * D + 4 * D
    dirs = 1 if cfg.direction == "forward" else 2
    return (D * S + S) + dirs * 3 * (D * S + S) + (S * D + D)


def block_params(cfg: EncoderConfig) -> int:
    D, M = cfg.embed_dim, cfg.mlp_dim
    return 4 * D + mixer_params(cfg) + (D * M + M + M * D + D)


def patchify_params(cfg: EncoderConfig, include_bias: bool = True) -> int:
    pc = cfg.patch_config
    return pc.patch_dim * cfg.embed_dim + (cfg.embed_dim if include_bias else 0)


def count_params(cfg: EncoderConfig) -> int:
    """Closed-form size of the parameter registry of ``build_encoder(cfg)``."""
    D = cfg.embed_dim
    total = patchify_params(cfg) + cfg.seq_len * D + D  # projection, positions, CLS
    total += cfg.depth * block_params(cfg)
    total += 2 * D  # final norm
    if cfg.num_classes:
        total += D * cfg.num_classes + cfg.num_classes
    return total


def param_breakdown(cfg: EncoderConfig) -> dict[str, int]:
    D = cfg.embed_dim
    return {
        "patchify": patchify_params(cfg),
        "pos_embed": cfg.seq_len * D,
        "cls_token": D,
        "blocks": cfg.depth * block_params(cfg),
        "final_norm": 2 * D,
        "head": (D * cfg.num_classes + cfg.num_classes) if cfg.num_classes else 0,
    }
