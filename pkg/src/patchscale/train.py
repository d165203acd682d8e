"""Training and evaluation loops, learning-rate schedule and recipe presets."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .model import Encoder, SegmentationModel, content_hash, forward_classify
from .tensor_core import AdamW, no_grad


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, batch: int, history: list[float]):
        self.step, self.batch, self.history = step, batch, history
        super().__init__(f"non-finite loss at step {step} (batch {batch}); "
                         f"recent losses {[round(v, 6) for v in history]}")


@dataclass(frozen=True)
class Recipe:
    base_lr: float = 5e-4
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.999)
    epochs: int = 300
    warmup_epochs: int = 5
    batch_size: int = 1024
    label_smoothing: float = 0.0
    drop_path: float = 0.1
    schedule: str = "cosine"
    seed: int = 0
    eps: float = 1e-8
    augment: bool = False
    # recorded only; not implemented at desk scale
    layer_decay: float | None = None
    repeated_aug: bool = False
    three_augment: bool = False
    rand_augment: str | None = None

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        for name in ("base_lr", "weight_decay", "label_smoothing", "drop_path", "epochs",
                     "warmup_epochs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule != "cosine":
            raise ValueError(f"only the cosine schedule is implemented, got {self.schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Recipe":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown recipe fields {sorted(unknown)}")
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    @property
    def recipe_hash(self) -> str:
        return content_hash(self.to_dict())


def _r(**kw) -> Recipe:
    return Recipe(**kw)


# Appendix recipes, stored verbatim.
RECIPES: dict[str, Recipe] = {
    "pretrain": _r(base_lr=5e-4, weight_decay=0.05, epochs=300, betas=(0.9, 0.999), batch_size=1024,
                   warmup_epochs=5, drop_path=0.1, repeated_aug=True, three_augment=True),
    "pretrain_large": _r(base_lr=2e-4, weight_decay=0.3, epochs=200, betas=(0.9, 0.95), batch_size=4096,
                         warmup_epochs=20, drop_path=0.2, repeated_aug=True, three_augment=True),
    "finetune_small": _r(base_lr=1e-5, weight_decay=0.1, epochs=20, betas=(0.9, 0.999), batch_size=512,
                         warmup_epochs=5, drop_path=0.4, label_smoothing=0.1,
                         rand_augment="rand-m9-mstd0.5-inc1"),
    "finetune_base": _r(base_lr=1e-5, weight_decay=0.1, epochs=20, betas=(0.9, 0.999), batch_size=512,
                        warmup_epochs=5, drop_path=0.6, label_smoothing=0.1,
                        rand_augment="rand-m9-mstd0.5-inc1"),
    "finetune_large": _r(base_lr=2e-5, weight_decay=0.1, epochs=50, betas=(0.9, 0.95), batch_size=512,
                         warmup_epochs=5, drop_path=0.6, layer_decay=0.95, label_smoothing=0.1,
                         rand_augment="rand-m9-mstd0.5-inc1"),
    "intermediate_small": _r(base_lr=5e-4, weight_decay=0.05, epochs=100, betas=(0.9, 0.999),
                             batch_size=1024, warmup_epochs=5, drop_path=0.2, repeated_aug=True,
                             three_augment=True),
    "intermediate_base": _r(base_lr=5e-4, weight_decay=0.05, epochs=100, betas=(0.9, 0.999),
                            batch_size=1024, warmup_epochs=5, drop_path=0.4, repeated_aug=True,
                            three_augment=True),
    "intermediate_large": _r(base_lr=8e-4, weight_decay=0.3, epochs=50, betas=(0.9, 0.95), batch_size=4096,
                             warmup_epochs=20, drop_path=0.4, layer_decay=0.9, repeated_aug=True,
                             three_augment=True),
    # DeiT recipe quoted in the main text (lr 1e-3, wd 0.05, batch 1024, 300 epochs)
    "deit": _r(base_lr=1e-3, weight_decay=0.05, epochs=300, batch_size=1024, warmup_epochs=5,
               drop_path=0.1, repeated_aug=True, three_augment=True),
    # desk scale: one recipe for every patch size in a sweep
    "desk": _r(base_lr=4e-3, weight_decay=0.05, epochs=20, betas=(0.9, 0.999), batch_size=32,
               warmup_epochs=1, drop_path=0.0),
}


def get_recipe(name: str, **overrides) -> Recipe:
    try:
        r = RECIPES[name]
    except KeyError:
        raise ValueError(f"unknown recipe {name!r}; choose from {sorted(RECIPES)}") from None
    return replace(r, **overrides) if overrides else r


def lr_at(step: int, recipe: Recipe, steps_per_epoch: int) -> float:
    """Linear warmup from 0, then cosine decay to 1e-6 * base_lr at the final step."""
    base = recipe.base_lr
    warm = recipe.warmup_epochs * steps_per_epoch
    total = recipe.epochs * steps_per_epoch
    if step < warm:
        return base * step / warm
    last = total - 1
    if last <= warm:
        return base
    progress = min((step - warm) / (last - warm), 1.0)
    floor = 1e-6 * base
    return floor + (base - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    test_loss: float
    top1: float
    samples: int
    miou: float | None = None

    def to_dict(self) -> dict:
        d = {"test_loss": self.test_loss, "top1": self.top1, "samples": self.samples}
        if self.miou is not None:
            d["miou"] = self.miou
        return d


def confusion_counts(pred: np.ndarray, target: np.ndarray, num_classes: int) -> np.ndarray:
    idx = target.reshape(-1).astype(np.int64) * num_classes + pred.reshape(-1).astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def mean_iou(conf: np.ndarray) -> float:
    """Mean IoU over classes present in the ground truth (rows of ``conf``)."""
    inter = np.diag(conf).astype(np.float64)
    gt = conf.sum(axis=1)
    union = gt + conf.sum(axis=0) - inter
    present = gt > 0
    if not present.any():
        raise ValueError("no ground-truth pixels")
    return float(np.mean(inter[present] / union[present]))


def _is_segmenter(model) -> bool:
    return isinstance(model, SegmentationModel)


def predict_logits(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i:i + batch_size]).data)
    model.train(was_training)
    return np.concatenate(out, axis=0)


def evaluate(model, dataset, batch_size: int = 64) -> EvalReport:
    """Exact pass over ``dataset`` in eval mode (no dropout, no drop path, no augmentation)."""
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    loss_sum = 0.0
    correct = 0
    count = 0
    seg = dataset.masks is not None
    K = dataset.num_classes
    conf = np.zeros((K, K), dtype=np.int64)
    with no_grad():
        for i in range(0, n, batch_size):
            x = dataset.images[i:i + batch_size]
            logits = model(x).data.astype(np.float64)
            if seg:
                y = dataset.masks[i:i + batch_size]
                flat = np.moveaxis(logits, 1, -1).reshape(-1, logits.shape[1])
                target = y.reshape(-1)
            else:
                flat = logits
                target = dataset.labels[i:i + batch_size]
            z = flat - flat.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            loss_sum += float(-logp[np.arange(len(target)), target].sum())
            pred = flat.argmax(axis=1)
            correct += int((pred == target).sum())
            count += len(target)
            if seg:
                conf += confusion_counts(pred, target, K)
    model.train(was_training)
    return EvalReport(test_loss=loss_sum / count, top1=correct / count, samples=n,
                      miou=mean_iou(conf) if seg else None)


# ---------------------------------------------------------------- training

def _augment(x: np.ndarray, y, rng: np.random.Generator, seg: bool):
    """Random horizontal flip and random crop after 4-pixel zero padding."""
    B, C, H, W = x.shape
    x = x.copy()
    y = y.copy() if seg else y
    flip = rng.random(B) < 0.5
    x[flip] = x[flip, :, :, ::-1]
    if seg:
        y[flip] = y[flip, :, ::-1]
    pad = 4
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    yp = np.pad(y, ((0, 0), (pad, pad), (pad, pad)), mode="reflect") if seg else None
    offs = rng.integers(0, 2 * pad + 1, size=(B, 2))
    for i, (dy, dx) in enumerate(offs):
        x[i] = xp[i, :, dy:dy + H, dx:dx + W]
        if seg:
            y[i] = yp[i, dy:dy + H, dx:dx + W]
    return x, y


def _fmt(v):
    if isinstance(v, float):
        return float(f"{v:.17g}")
    return v


def log_line(record: dict) -> str:
    return json.dumps({k: _fmt(v) for k, v in record.items()}, separators=(", ", ": "))


@dataclass
class TrainResult:
    model: object
    log: list = field(default_factory=list)
    steps: int = 0


def train_run(model, dataset, recipe: Recipe, eval_dataset=None, log_path=None,
              config_hash: str | None = None, record_wall_time: bool = True,
              eval_every: int = 1, seed: int | None = None) -> TrainResult:
    """Train ``model`` in place with AdamW and the recipe's schedule; one log record per epoch.

    ``seed`` (default ``recipe.seed``) fixes shuffling, augmentation and drop
    path; parameter initialization is the caller's business.
    Log keys: epoch, train_loss, lr, test_loss, top1, [miou], wall_s, config_hash.
    With ``record_wall_time=False`` wall_s is written as 0.0 so that logs are
    byte-reproducible.
    """
    seg = dataset.masks is not None
    n = len(dataset)
    bs = recipe.batch_size
    spe = max(1, math.ceil(n / bs))
    mean, std = dataset.channel_stats()
    model.set_normalization(mean, std)
    params = model.named_parameters()
    opt = AdamW(params, lr=recipe.base_lr, betas=recipe.betas, eps=recipe.eps,
                weight_decay=recipe.weight_decay, no_decay=model.no_decay_names())
    config_hash = config_hash or content_hash({"recipe": recipe.to_dict()})
    seed = recipe.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    model.train()
    _set_drop_path(model, recipe.drop_path)
    history: list[float] = []
    log = []
    step = 0
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(recipe.epochs):
            t0 = time.perf_counter()
            perm = np.random.default_rng([seed, epoch]).permutation(n)
            losses = []
            lr = 0.0
            for b in range(spe):
                idx = np.sort(perm[b * bs:(b + 1) * bs])
                x = dataset.images[idx]
                y = dataset.masks[idx] if seg else dataset.labels[idx]
                if recipe.augment:
                    x, y = _augment(x, y, rng, seg)
                lr = lr_at(step, recipe, spe)
                opt.zero_grad()
                try:
                    out = model(x, rng)
                    if seg:
                        K = out.shape[1]
                        flat = tc.reshape(tc.transpose(out, (0, 2, 3, 1)), (-1, K))
                        loss = tc.cross_entropy(flat, y.reshape(-1), recipe.label_smoothing)
                    else:
                        loss = tc.cross_entropy(out, y, recipe.label_smoothing)
                except tc.NonFiniteError as e:
                    raise TrainingDiverged(step, b, history) from e
                val = loss.item()
                history = (history + [val])[-10:]
                if not math.isfinite(val):
                    raise TrainingDiverged(step, b, history)
                tc.backward(loss)
                opt.step(lr)
                losses.append(val)
                step += 1
            rec = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": float(lr)}
            if eval_dataset is not None and ((epoch + 1) % eval_every == 0 or epoch == recipe.epochs - 1):
                rep = evaluate(model, eval_dataset)
                rec["test_loss"] = rep.test_loss
                rec["top1"] = rep.top1
                if rep.miou is not None:
                    rec["miou"] = rep.miou
            else:
                rec["test_loss"] = None
                rec["top1"] = None
            rec["wall_s"] = float(time.perf_counter() - t0) if record_wall_time else 0.0
            rec["config_hash"] = config_hash
            log.append(rec)
            if fh:
                fh.write(log_line(rec) + "\n")
                fh.flush()
    finally:
        if fh:
            fh.close()
    model.eval()
    return TrainResult(model, log, step)


def _set_drop_path(model, rate: float) -> None:
    enc = model.encoder if isinstance(model, SegmentationModel) else model
    depth = len(enc.blocks)
    for i, blk in enumerate(enc.blocks):
        blk.cfg = replace(blk.cfg, drop_path_rate=rate * i / max(depth - 1, 1))
