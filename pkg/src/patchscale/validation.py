"""Input validation helpers shared by the estimators, harness and CLI."""
from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    """Invalid geometry or architecture configuration."""


def check_patch_divides(h: int, w: int, p: int) -> None:
    if p < 1:
        raise ConfigError(f"patch size must be >= 1, got p={p}")
    if h % p or w % p:
        raise ConfigError(f"patch size p={p} does not divide image H={h}, W={w}")


def check_images(X, channels: int | None = None, size: int | None = None) -> np.ndarray:
    """Return X as a float array [N, C, H, W] with values in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [N, C, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[2:] != (size, size):
        raise ValueError(f"expected {size}x{size} images, got {X.shape[2]}x{X.shape[3]}; "
                         "resize explicitly, no silent resizing")
    if X.dtype.kind not in "fiu":
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float64, copy=False) if X.dtype.kind != "f" else X
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or Inf")
    return X


def check_labels(y, n: int, num_classes: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.dtype.kind not in "iu":
        if y.dtype.kind == "f" and np.all(y == np.round(y)):
            y = y.astype(np.int64)
        else:
            raise ValueError(f"labels must be integers, got dtype {y.dtype}")
    if y.size and y.min() < 0:
        raise ValueError(f"labels must be >= 0, got {y.min()}")
    if num_classes is not None and y.size and y.max() >= num_classes:
        raise ValueError(f"label {y.max()} out of range for {num_classes} classes")
    return y.astype(np.int64)


def check_masks(masks, images_shape: tuple, num_classes: int | None = None) -> np.ndarray:
    masks = np.asarray(masks)
    n, _, h, w = images_shape
    if masks.shape != (n, h, w):
        raise ValueError(f"masks must be shaped {(n, h, w)}, got {masks.shape}")
    if masks.dtype.kind not in "iu":
        raise ValueError(f"masks must be integer class ids, got dtype {masks.dtype}")
    if num_classes is not None and masks.size and masks.max() >= num_classes:
        raise ValueError(f"mask value {masks.max()} out of range for {num_classes} classes")
    return masks.astype(np.int64)
