"""Datasets: synthetic texture-coded generators, small binary formats, resizing and a single-file container."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interp import interp_matrix
from .validation import check_labels, check_masks


class DataFormatError(ValueError):
    """Malformed dataset file; the message names the byte offset."""


@dataclass
class Dataset:
    images: np.ndarray                  # [N, C, H, W] in [0, 1]
    labels: np.ndarray | None = None    # [N] class ids
    masks: np.ndarray | None = None     # [N, H, W] class ids
    num_classes: int = 0
    split: str = "train"
    native_resolution: int | None = None
    seed: int | None = None
    normalization: tuple | None = None  # (mean[C], std[C]) from the train split
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        if self.images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got {self.images.shape}")
        if (self.labels is None) == (self.masks is None):
            raise ValueError("a dataset carries exactly one of labels or masks")
        n = len(self.images)
        if self.labels is not None:
            self.labels = check_labels(self.labels, n, self.num_classes or None)
            if not self.num_classes:
                self.num_classes = int(self.labels.max()) + 1 if n else 0
        else:
            self.masks = check_masks(self.masks, self.images.shape, self.num_classes or None)
            if not self.num_classes:
                self.num_classes = int(self.masks.max()) + 1 if n else 0
        if n and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.native_resolution is None:
            self.native_resolution = self.images.shape[-1]

    def __len__(self) -> int:
        return len(self.images)

    @property
    def targets(self) -> np.ndarray:
        return self.labels if self.labels is not None else self.masks

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel (mean, std); stored normalization wins over recomputation."""
        if self.normalization is not None:
            m, s = self.normalization
            return np.asarray(m, dtype=np.float64), np.asarray(s, dtype=np.float64)
        x = self.images.astype(np.float64)
        mean = x.mean(axis=(0, 2, 3))
        std = np.maximum(x.std(axis=(0, 2, 3)), 1e-6)
        return mean, std

    def with_normalization_from(self, train: "Dataset") -> "Dataset":
        m, s = train.channel_stats()
        self.normalization = (m.tolist(), s.tolist())
        return self

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx],
                       None if self.masks is None else self.masks[idx], self.num_classes, self.split,
                       self.native_resolution, self.seed, self.normalization, dict(self.meta))

    def batches(self, batch_size: int, seed: int | None = None):
        """Yield (images, targets) batches; the last partial batch is kept.

        The permutation comes from numpy's PCG64 stream and is therefore the
        same on every platform.
        """
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        n = len(self)
        order = np.arange(n) if seed is None else np.random.default_rng(seed).permutation(n)
        for i in range(0, n, batch_size):
            idx = np.sort(order[i:i + batch_size])
            yield self.images[idx], self.targets[idx]

    def resized(self, size: int) -> "Dataset":
        """Bilinear (align corners) resize of images; masks use nearest sampling."""
        imgs = resize_bilinear(self.images, size)
        masks = None
        if self.masks is not None:
            H = self.masks.shape[-1]
            src = np.rint(np.arange(size) * (H - 1) / max(size - 1, 1)).astype(int) if size > 1 else np.zeros(1, int)
            masks = self.masks[:, src][:, :, src]
        return Dataset(np.clip(imgs, 0, 1), self.labels, masks, self.num_classes, self.split,
                       self.native_resolution, self.seed, None, dict(self.meta))

    # single-file container

    def save(self, path) -> None:
        save_dataset(path, self)

    @classmethod
    def load(cls, path) -> "Dataset":
        return load_dataset(path)


# ---------------------------------------------------------------- resizing

def resize_bilinear(image, new_size: int) -> np.ndarray:
    """Align-corners bilinear resize of the last two axes to ``new_size`` x ``new_size``."""
    if new_size < 1:
        raise ValueError(f"new_size must be >= 1, got {new_size}")
    image = np.asarray(image)
    H, W = image.shape[-2:]
    if (H, W) == (new_size, new_size):
        return image.copy()
    R = interp_matrix(new_size, H)
    C = interp_matrix(new_size, W)
    out = np.einsum("ih,...hw,jw->...ij", R, image.astype(np.float64), C, optimize=True)
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------- synthetic classification

_TETRA = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) / np.sqrt(3.0)


def class_palettes(num_classes: int, task_seed: int = 0) -> np.ndarray:
    """[K, 4, 3] colour offsets: each class gets a randomly rotated regular tetrahedron.

    All palettes share mean 0 and covariance I/3, so averaging many pixels
    (a coarse patch) leaves nothing but higher-order moments to tell the
    classes apart.
    """
    rng = np.random.default_rng([task_seed, 0x7A1])
    out = np.empty((num_classes, 4, 3))
    for k in range(num_classes):
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))
        out[k] = _TETRA @ q.T
    return out


def class_signatures(num_classes: int, size: int, task_seed: int = 0) -> np.ndarray:
    """[K, 3, size, size] fixed +-1 per-pixel patterns, one per class."""
    rng = np.random.default_rng([task_seed, 0x516])
    return rng.choice(np.array([-1.0, 1.0]), size=(num_classes, 3, size, size))


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    y = np.arange(n) % k
    rng.shuffle(y)
    return y


def _disk(size, cx, cy, r):
    yy, xx = np.mgrid[:size, :size]
    return (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r


def _check_synth(n, size, num_classes):
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if size < 8:
        raise ValueError(f"size must be >= 8, got {size}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")


def synth_classification(n: int, size: int = 32, num_classes: int = 4, seed: int = 0, *,
                         texture=0.15, scales=(1,), signature: float = 0.0, noise: float = 0.05,
                         distractors: int = 2, distractor_amp: float = 0.15, task_seed: int = 0,
                         split: str = "train") -> Dataset:
    """Images whose class lives at the pixel scale.

    Each pixel gets a colour offset drawn uniformly from its class palette
    (``texture``), plus a faint fixed per-class +-1 pattern (``signature``),
    plus class-independent soft disks (``distractors``) and Gaussian noise.
    ``seed`` draws the samples; ``task_seed`` fixes palettes and signatures,
    so train and test splits built with different seeds share one task.
    """
    _check_synth(n, size, num_classes)
    scales = tuple(int(v) for v in np.atleast_1d(scales))
    if np.min(texture) < 0 or min(signature, noise, distractor_amp) < 0 or distractors < 0:
        raise ValueError("amplitudes and distractor count must be >= 0")
    rng = np.random.default_rng([seed, size, num_classes])
    pal = class_palettes(num_classes, task_seed)
    sig = class_signatures(num_classes, size, task_seed)
    y = _balanced_labels(n, num_classes, rng)
    amps = np.broadcast_to(np.asarray(texture, dtype=np.float64), (len(scales),))
    x = np.full((n, 3, size, size), 0.5)
    for s, a in zip(scales, amps):
        if size % s:
            raise ValueError(f"texture scale {s} does not divide size {size}")
        g = size // s
        idx = rng.integers(0, 4, size=(n, g, g))
        blk = np.moveaxis(pal[y[:, None, None], idx], -1, 1)
        x += a * np.repeat(np.repeat(blk, s, axis=2), s, axis=3)
    x += signature * sig[y]
    for i in range(n):
        for _ in range(distractors):
            cx, cy = rng.uniform(0, size, 2)
            r = rng.uniform(size / 10, size / 3)
            m = _disk(size, cx, cy, r)
            x[i][:, m] += distractor_amp * rng.uniform(-1, 1, size=(3, 1))
    x += noise * rng.normal(size=x.shape)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    meta = {"generator": "synth_classification", "texture": np.atleast_1d(texture).tolist(),
            "scales": list(scales), "signature": signature,
            "noise": noise, "distractors": distractors, "distractor_amp": distractor_amp,
            "task_seed": task_seed}
    return Dataset(x, y, None, num_classes, split, size, seed, None, meta)


def synth_blobs(n: int, size: int = 8, seed: int = 0, split: str = "train") -> Dataset:
    """Two linearly separable classes: dark vs bright images with mild noise."""
    rng = np.random.default_rng([seed, size, 2])
    y = _balanced_labels(n, 2, rng)
    x = 0.3 + 0.4 * y[:, None, None, None] + 0.05 * rng.normal(size=(n, 3, size, size))
    return Dataset(np.clip(x, 0, 1).astype(np.float32), y, None, 2, split, size, seed, None,
                   {"generator": "synth_blobs"})


# ---------------------------------------------------------------- synthetic segmentation

def class_colors(num_classes: int, task_seed: int = 0) -> np.ndarray:
    """[K, 3] base colours; class 0 (background) is mid grey, the rest spread over hue."""
    cols = np.empty((num_classes, 3))
    cols[0] = 0.5
    rng = np.random.default_rng([task_seed, 0xC01])
    off = rng.uniform(0, 1)
    for k in range(1, num_classes):
        h = (off + (k - 1) / max(num_classes - 1, 1)) % 1.0
        ang = 2 * np.pi * (h + np.array([0.0, 1 / 3, 2 / 3]))
        cols[k] = 0.5 + 0.35 * np.cos(ang)
    return cols


def rasterize(shape: dict, size: int) -> np.ndarray:
    """Boolean [size, size] coverage of a shape; the single rasterizer behind images and masks.

    Kinds: disk (cx, cy, r), rect (x0, y0, x1, y1), stroke (x0, y0, x1, y1, width).
    """
    yy, xx = np.mgrid[:size, :size] + 0.5
    kind = shape["kind"]
    if kind == "disk":
        return (xx - shape["cx"]) ** 2 + (yy - shape["cy"]) ** 2 <= shape["r"] ** 2
    if kind == "rect":
        return (xx >= shape["x0"]) & (xx < shape["x1"]) & (yy >= shape["y0"]) & (yy < shape["y1"])
    if kind == "stroke":
        x0, y0, x1, y1 = shape["x0"], shape["y0"], shape["x1"], shape["y1"]
        dx, dy = x1 - x0, y1 - y0
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / max(dx * dx + dy * dy, 1e-12), 0, 1)
        d2 = (xx - x0 - t * dx) ** 2 + (yy - y0 - t * dy) ** 2
        return d2 <= (shape["width"] / 2) ** 2
    raise ValueError(f"unknown shape kind {kind!r}")


def _random_shapes(rng, size, num_classes, n_shapes, n_strokes):
    shapes = []
    for _ in range(n_shapes):
        c = int(rng.integers(1, num_classes))
        if rng.random() < 0.5:
            shapes.append({"kind": "disk", "cx": rng.uniform(0, size), "cy": rng.uniform(0, size),
                           "r": rng.uniform(size / 10, size / 4), "cls": c})
        else:
            x0, y0 = rng.uniform(-size / 8, size * 0.8, 2)
            w, h = rng.uniform(size / 6, size / 2.5, 2)
            shapes.append({"kind": "rect", "x0": x0, "y0": y0, "x1": x0 + w, "y1": y0 + h, "cls": c})
    for _ in range(n_strokes):
        c = int(rng.integers(1, num_classes))
        x0, y0, x1, y1 = rng.uniform(0, size, 4)
        shapes.append({"kind": "stroke", "x0": x0, "y0": y0, "x1": x1, "y1": y1,
                       "width": float(rng.choice([1.0, 2.0])), "cls": c})
    return shapes


def synth_segmentation(n: int, size: int = 32, num_classes: int = 4, seed: int = 0, *,
                       shapes: int = 3, strokes: int = 2, texture: float = 0.06, noise: float = 0.05,
                       task_seed: int = 0, split: str = "train") -> Dataset:
    """Coloured disks, rectangles and 1-2 px strokes on a textured background; masks share the rasterizer."""
    _check_synth(n, size, num_classes)
    rng = np.random.default_rng([seed, size, num_classes, 1])
    cols = class_colors(num_classes, task_seed)
    x = np.empty((n, 3, size, size))
    masks = np.zeros((n, size, size), dtype=np.int64)
    yy, xx = np.mgrid[:size, :size] / max(size - 1, 1)
    for i in range(n):
        g = rng.uniform(-0.1, 0.1, size=(3, 1, 1))
        img = cols[0][:, None, None] + g * (xx - 0.5) + g[::-1] * (yy - 0.5)
        img = img + texture * rng.uniform(-1, 1, size=(3, size, size))
        m = masks[i]
        for s in _random_shapes(rng, size, num_classes, shapes, strokes):
            cover = rasterize(s, size)
            col = cols[s["cls"]] + rng.uniform(-0.05, 0.05, 3)
            img[:, cover] = col[:, None] + texture * rng.uniform(-1, 1, size=(3, int(cover.sum())))
            m[cover] = s["cls"]
        x[i] = img
    x += noise * rng.normal(size=x.shape)
    meta = {"generator": "synth_segmentation", "shapes": shapes, "strokes": strokes,
            "texture": texture, "noise": noise, "task_seed": task_seed}
    return Dataset(np.clip(x, 0, 1).astype(np.float32), None, masks, num_classes, split, size, seed,
                   None, meta)


# ---------------------------------------------------------------- small binary formats

_IDX_TYPES = {0x08: np.dtype(">u1"), 0x09: np.dtype(">i1"), 0x0B: np.dtype(">i2"),
              0x0C: np.dtype(">i4"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def _read_idx(buf: bytes, expect_dims: int, what: str) -> np.ndarray:
    if len(buf) < 4:
        raise DataFormatError(f"{what}: truncated header at byte 0: expected 4 bytes, got {len(buf)}")
    zero, code, ndim = struct.unpack_from(">HBB", buf, 0)
    magic = (code << 8) | ndim
    if zero != 0 or code not in _IDX_TYPES:
        raise DataFormatError(f"{what}: bad magic 0x{int.from_bytes(buf[:4], 'big'):08x} at byte 0")
    if ndim != expect_dims:
        raise DataFormatError(f"{what}: bad magic 0x{magic:08x} at byte 0: expected {expect_dims} dimensions")
    head = 4 + 4 * ndim
    if len(buf) < head:
        raise DataFormatError(f"{what}: truncated header at byte {len(buf)}: expected {head} bytes")
    dims = struct.unpack_from(">" + "I" * ndim, buf, 4)
    dt = _IDX_TYPES[code]
    need = head + int(np.prod(dims)) * dt.itemsize
    if len(buf) < need:
        raise DataFormatError(f"{what}: truncated data at byte {len(buf)}: expected {need} bytes, got {len(buf)}")
    if len(buf) > need:
        raise DataFormatError(f"{what}: {len(buf) - need} trailing bytes after byte {need}")
    return np.frombuffer(buf, dtype=dt, count=int(np.prod(dims)), offset=head).reshape(dims)


def _scale(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.kind in "iu":
        return (arr.astype(np.float32) / 255.0).clip(0, 1)
    return arr.astype(np.float32).clip(0, 1)


def load_small_binary(path, format: str = "idx", labels_path=None, num_classes: int | None = None,
                      split: str = "train") -> Dataset:
    """Read an IDX image file (magic 0x00000803, optional 0x00000801 labels) or a CIFAR binary batch."""
    path = Path(path)
    buf = path.read_bytes()
    if format == "idx":
        imgs = _read_idx(buf, 3, str(path))
        x = _scale(imgs)[:, None]
        if labels_path is not None:
            y = _read_idx(Path(labels_path).read_bytes(), 1, str(labels_path)).astype(np.int64)
            if len(y) != len(x):
                raise DataFormatError(f"{labels_path}: {len(y)} labels for {len(x)} images")
        else:
            y = np.zeros(len(x), dtype=np.int64)
        return Dataset(x, y, None, num_classes or int(y.max()) + 1, split, x.shape[-1], None, None,
                       {"source": str(path), "format": "idx"})
    if format == "cifar_binary":
        row = 1 + 3 * 32 * 32
        if len(buf) % row:
            n_full = len(buf) // row
            raise DataFormatError(f"{path}: truncated record at byte {n_full * row}: expected "
                                  f"{(n_full + 1) * row} bytes, got {len(buf)}")
        a = np.frombuffer(buf, dtype=np.uint8).reshape(-1, row)
        y = a[:, 0].astype(np.int64)
        x = (a[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        return Dataset(x, y, None, num_classes or 10, split, 32, None, None,
                       {"source": str(path), "format": "cifar_binary"})
    raise ValueError(f"unknown format {format!r}; expected 'idx' or 'cifar_binary'")


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array in IDX layout (big-endian header)."""
    a = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, 0x08, a.ndim))
        f.write(struct.pack(">" + "I" * a.ndim, *a.shape))
        f.write(a.tobytes())


def write_cifar_binary(path, images_u8: np.ndarray, labels) -> None:
    imgs = np.ascontiguousarray(images_u8, dtype=np.uint8).reshape(len(images_u8), -1)
    rows = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], imgs], axis=1)
    Path(path).write_bytes(rows.tobytes())


# ---------------------------------------------------------------- container

_MAGIC = b"PSDATA\0\0"
_VERSION = 1


def save_dataset(path, ds: Dataset) -> None:
    """Magic, u32 version, u64 header length, JSON header, then little-endian buffers."""
    mean, std = ds.channel_stats()
    img = np.ascontiguousarray(ds.images, dtype="<f4")
    tgt = np.ascontiguousarray(ds.targets, dtype="<i8")
    header = {
        "dims": list(img.shape), "classes": ds.num_classes, "seed": ds.seed, "split": ds.split,
        "native_resolution": ds.native_resolution,
        "normalization": {"mean": [float(v) for v in mean], "std": [float(v) for v in std]},
        "target": "labels" if ds.labels is not None else "masks",
        "target_shape": list(tgt.shape), "meta": ds.meta,
        "buffers": [{"name": "images", "dtype": "<f4", "nbytes": img.nbytes},
                    {"name": "targets", "dtype": "<i8", "nbytes": tgt.nbytes}],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(hb)))
        f.write(hb)
        f.write(img.tobytes())
        f.write(tgt.tobytes())


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != _MAGIC:
        raise DataFormatError(f"{path}: bad magic at byte 0")
    if len(buf) < 20:
        raise DataFormatError(f"{path}: truncated header at byte {len(buf)}: expected 20 bytes")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != _VERSION:
        raise DataFormatError(f"{path}: unsupported version {version} at byte 8")
    if len(buf) < 20 + hlen:
        raise DataFormatError(f"{path}: truncated header at byte {len(buf)}: expected {20 + hlen} bytes")
    header = json.loads(buf[20:20 + hlen])
    off = 20 + hlen
    need = off + sum(b["nbytes"] for b in header["buffers"])
    if len(buf) != need:
        raise DataFormatError(f"{path}: truncated data at byte {len(buf)}: expected {need} bytes")
    n_img = header["buffers"][0]["nbytes"]
    img = np.frombuffer(buf, dtype="<f4", count=n_img // 4, offset=off).reshape(header["dims"])
    tgt = np.frombuffer(buf, dtype="<i8", offset=off + n_img).reshape(header["target_shape"])
    norm = header["normalization"]
    labels, masks = (tgt, None) if header["target"] == "labels" else (None, tgt)
    return Dataset(img.astype(np.float32), labels, masks, header["classes"], header["split"],
                   header["native_resolution"], header["seed"], (norm["mean"], norm["std"]),
                   header["meta"])
