"""Tokenization geometry: images to token sequences at any patch size p >= 1."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .interp import interp_matrix
from .nn import Module
from .tensor_core import Tensor
from .validation import ConfigError, check_patch_divides


@dataclass(frozen=True)
class PatchConfig:
    """Square images cut into non-overlapping p x p patches.

    ``extend`` > 1 bilinearly upsamples the token grid by that factor after
    the projection (the information-free sequence-extension ablation).
    """

    image_h: int
    image_w: int
    patch: int
    embed_dim: int
    channels: int = 3
    extend: int = 1

    def __post_init__(self):
        if self.image_h != self.image_w:
            raise ConfigError(f"only square images are supported, got H={self.image_h}, W={self.image_w}")
        check_patch_divides(self.image_h, self.image_w, self.patch)
        if self.embed_dim < 1 or self.channels < 1:
            raise ConfigError(f"embed_dim and channels must be positive, got {self.embed_dim}, {self.channels}")
        if self.extend < 1:
            raise ConfigError(f"extension factor must be >= 1, got {self.extend}")

    @property
    def base_grid(self) -> tuple[int, int]:
        return self.image_h // self.patch, self.image_w // self.patch

    @property
    def grid(self) -> tuple[int, int]:
        gh, gw = self.base_grid
        return gh * self.extend, gw * self.extend

    @property
    def seq_len(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels


def seq_len(image_size: int, patch: int, extend: int = 1) -> int:
    check_patch_divides(image_size, image_size, patch)
    return (image_size // patch * extend) ** 2


class PatchEmbedWeights(Module):
    def __init__(self, cfg: PatchConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.projection = self.param("projection", (cfg.patch_dim, D))
        self.bias = self.param("bias", (D,), ("zeros",), decay=False)
        self.pos_embed = self.param("pos_embed", (cfg.seq_len, D), decay=False)
        self.cls_token = self.param("cls_token", (1, D), decay=False)


def image_to_patches(images: Tensor, p: int) -> Tensor:
    """[B, C, H, W] -> [B, (H/p)(W/p), p*p*C]; row-major grid, each patch flattened (row, col, channel)."""
    B, C, H, W = images.shape
    gh, gw = H // p, W // p
    x = tc.reshape(images, (B, C, gh, p, gw, p))
    x = tc.transpose(x, (0, 2, 4, 3, 5, 1))
    return tc.reshape(x, (B, gh * gw, p * p * C))


def patchify_forward(image: Tensor, cfg: PatchConfig, w: PatchEmbedWeights) -> Tensor:
    """Tokens [B, L, D] (or [L, D] for a single [C, H, W] image); CLS not included."""
    image = tc.as_tensor(image)
    single = image.ndim == 3
    if single:
        image = tc.reshape(image, (1,) + image.shape)
    _, C, H, W = image.shape
    if (C, H, W) != (cfg.channels, cfg.image_h, cfg.image_w):
        raise ConfigError(
            f"image shape {(C, H, W)} does not match config {(cfg.channels, cfg.image_h, cfg.image_w)}"
        )
    check_patch_divides(H, W, cfg.patch)
    tokens = tc.linear(image_to_patches(image, cfg.patch), w.projection, w.bias)
    if cfg.extend > 1:
        tokens = extend_by_interpolation(tokens, cfg.base_grid, cfg.extend)
    tokens = tokens + w.pos_embed
    if single:
        tokens = tc.reshape(tokens, tokens.shape[1:])
    return tokens


def _resample_tokens(tokens, old_grid, new_grid):
    (gh, gw), (nh, nw) = old_grid, new_grid
    lead = tokens.shape[:-2]
    D = tokens.shape[-1]
    grid = tc.reshape(tokens, lead + (gh, gw, D))
    out = tc.grid_resample(grid, interp_matrix(nh, gh), interp_matrix(nw, gw))
    return tc.reshape(out, lead + (nh * nw, D))


def extend_by_interpolation(tokens, grid, factor: int):
    """Bilinearly upsample a g x g token grid by ``factor`` (align corners); no new information."""
    if factor < 1:
        raise ConfigError(f"extension factor must be >= 1, got {factor}")
    gh, gw = grid
    if tokens.shape[-2] != gh * gw:
        raise ConfigError(f"{tokens.shape[-2]} tokens do not form a {gh}x{gw} grid")
    if factor == 1:
        return tokens
    as_array = not isinstance(tokens, Tensor)
    out = _resample_tokens(tc.as_tensor(tokens) if not as_array else Tensor(tokens, dtype=np.asarray(tokens).dtype),
                           grid, (gh * factor, gw * factor))
    return out.data if as_array else out


def pos_embed_resample(pos, old_grid, new_grid):
    """Resample a square positional table [g*g, D] to [g'*g', D] (bilinear, align corners)."""
    L0 = pos.shape[0]
    g = math.isqrt(L0)
    if g * g != L0 or tuple(old_grid) != (g, g):
        raise ConfigError(f"positional table with {L0} rows is not the square grid {tuple(old_grid)}")
    nh, nw = new_grid
    if nh != nw:
        raise ConfigError(f"target grid must be square, got {new_grid}")
    if (nh, nw) == (g, g):
        return pos
    as_array = not isinstance(pos, Tensor)
    t = Tensor(pos, dtype=np.asarray(pos).dtype) if as_array else pos
    out = _resample_tokens(t, (g, g), (nh, nw))
    return out.data if as_array else out


def grid_view(tokens, cfg: PatchConfig):
    """Row-major inverse of the patch ordering: [..., L, D] -> [..., gh, gw, D] (CLS removed first)."""
    gh, gw = cfg.grid
    if tokens.shape[-2] != gh * gw:
        raise ConfigError(f"expected {gh * gw} spatial tokens for a {gh}x{gw} grid, got {tokens.shape[-2]}")
    shape = tuple(tokens.shape[:-2]) + (gh, gw, tokens.shape[-1])
    return tc.reshape(tokens, shape) if isinstance(tokens, Tensor) else np.reshape(tokens, shape)
