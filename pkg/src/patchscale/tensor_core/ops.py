"""Differentiable primitives.

Broadcasting is deliberately narrow: operands must have equal shapes, one of
them must hold a single element, or the smaller shape must be a suffix of the
larger one (a bias of shape [D] against tokens [B, L, D]).
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import BroadcastError, Tensor, make_result

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if int(np.prod(b)) == 1 and len(b) <= len(a):
        return a
    if int(np.prod(a)) == 1 and len(a) <= len(b):
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise BroadcastError(
        f"cannot broadcast {a} with {b}: only scalar and trailing-axis broadcast are supported"
    )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else _lift(a, Tensor(0.0))
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else _lift(a, Tensor(0.0))
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else _lift(a, Tensor(0.0))
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b) if isinstance(b, Tensor) else _lift(a, Tensor(0.0))
    b = _lift(b, a)
    _broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, k: float) -> Tensor:
    ad = a.data
    return make_result(ad ** k, (a,), lambda g: (g * k * ad ** (k - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.maximum(ad, 0), (a,), lambda g: (g * (ad > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return make_result(out, (a,), bw, "gelu")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid_np(x)
    return make_result(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a[..., M, K] @ b[K, N] or b[..., K, N] with matching leading extents."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
        b.ndim > 2 and a.shape[:-2] != b.shape[:-2]
    ):
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
        if b.requires_grad:
            if bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_result(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- reductions and shape

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axes, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                       lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    shape, dt = a.shape, a.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dt)
        np.add.at(out, idx, g)
        return (out,)

    return make_result(np.ascontiguousarray(a.data[idx]), (a,), bw, "getitem")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(tensors))
        )

    return make_result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def flip(a: Tensor, axis: int) -> Tensor:
    return make_result(np.ascontiguousarray(np.flip(a.data, axis)), (a,),
                       lambda g: (np.ascontiguousarray(np.flip(g, axis)),), "flip")


# ---------------------------------------------------------------- fused layers

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis.  A constant row maps to ``beta`` (zero before the affine)."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ValueError(f"layernorm: last axis {D} does not match gamma {gamma.shape} / beta {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = np.sqrt(var + eps)
    if eps == 0:
        denom = np.where(denom == 0, 1.0, denom)
    inv = 1.0 / denom
    xhat = xc * inv
    gd = gamma.data

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, D).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, D).sum(axis=0)
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return make_result(xhat * gd + beta.data, (x, gamma, beta), bw, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def attention_core(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """softmax(scale * q k^T) v over the last two axes of [..., L, d] inputs.

    Works one [L, L] score slice at a time and keeps only the row
    log-sum-exp; the backward pass recomputes the probabilities slice by
    slice, so peak memory is O(L^2) per slice instead of per batch.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"attention inputs differ: q {q.shape}, k {k.shape}, v {v.shape}")
    lead = q.shape[:-2]
    L, d = q.shape[-2:]
    qd = q.data.reshape((-1, L, d))
    kd = k.data.reshape((-1, L, d))
    vd = v.data.reshape((-1, L, d))
    out = np.empty_like(qd)
    lse = np.empty(qd.shape[:2], dtype=qd.dtype)
    for i in range(len(qd)):
        s = qd[i] @ kd[i].T
        s *= scale
        m = s.max(axis=1, keepdims=True)
        s -= m
        np.exp(s, out=s)
        tot = s.sum(axis=1, keepdims=True)
        s /= tot
        out[i] = s @ vd[i]
        lse[i] = (m + np.log(tot))[:, 0]

    def bw(g):
        g = g.reshape(qd.shape)
        gq = np.empty_like(qd)
        gk = np.empty_like(kd)
        gv = np.empty_like(vd)
        for i in range(len(qd)):
            p = qd[i] @ kd[i].T
            p *= scale
            p -= lse[i][:, None]
            np.exp(p, out=p)
            gv[i] = p.T @ g[i]
            dp = g[i] @ vd[i].T
            dp -= (g[i] * out[i]).sum(axis=1, keepdims=True)
            dp *= p
            dp *= scale
            gq[i] = dp @ kd[i]
            gk[i] = dp.T @ qd[i]
        shape = lead + (L, d)
        return gq.reshape(shape), gk.reshape(shape), gv.reshape(shape)

    return make_result(out.reshape(lead + (L, d)), (q, k, v), bw, "attention_core")


def cross_entropy(logits: Tensor, targets, label_smoothing: float = 0.0) -> Tensor:
    """Mean smoothed negative log-likelihood over rows of ``logits`` [B, C].

    The smoothed target puts ``1 - s`` on the true class plus ``s / C`` on
    every class.
    """
    targets = np.asarray(targets).astype(np.int64).reshape(-1)
    B, C = logits.shape
    if targets.shape[0] != B:
        raise ValueError(f"cross_entropy: {B} rows of logits but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        bad = targets[(targets < 0) | (targets >= C)][0]
        raise ValueError(f"cross_entropy: target {bad} out of range [0, {C})")
    xd = logits.data
    z = xd - xd.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    s = float(label_smoothing)
    rows = np.arange(B)
    nll = -logp[rows, targets]
    loss = (1.0 - s) * nll - s * logp.mean(axis=1) if s else nll
    out = np.asarray(loss.mean(), dtype=xd.dtype)

    def bw(g):
        q = np.full((B, C), s / C, dtype=xd.dtype)
        q[rows, targets] += 1.0 - s
        return ((np.exp(logp) - q) * (g / B),)

    return make_result(out, (logits,), bw, "cross_entropy")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    if not training or p == 0.0:
        return x
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must be in [0, 1], got {p}")
    rng = rng or np.random.default_rng()
    keep = 1.0 - p
    mask = (rng.random(x.shape) < keep).astype(x.dtype)
    if keep > 0:
        mask /= keep
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def drop_path(x: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Zero whole samples (axis 0) with probability ``p``; survivors scaled by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"drop_path probability must be in [0, 1], got {p}")
    rng = rng or np.random.default_rng()
    keep = 1.0 - p
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype)
    if keep > 0:
        mask /= keep
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "drop_path")


# ---------------------------------------------------------------- spatial helpers

def grid_resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply separable linear maps over the grid axes of x[..., H, W, D].

    ``rows`` is [H', H] and ``cols`` is [W', W]; output is x[..., H', W', D].
    """
    rows = np.asarray(rows, dtype=x.dtype)
    cols = np.asarray(cols, dtype=x.dtype)
    out = np.einsum("ah,...hwd,bw->...abd", rows, x.data, cols, optimize=True)

    def bw(g):
        return (np.einsum("ah,...abd,bw->...hwd", rows, g, cols, optimize=True),)

    return make_result(out, (x,), bw, "grid_resample")


def unfold3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 neighbourhoods: x[B, H, W, C] -> [B, H, W, 9*C]."""
    B, H, W, C = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = [xp[:, i:i + H, j:j + W, :] for i in range(3) for j in range(3)]
    out = np.concatenate(cols, axis=-1)

    def bw(g):
        gp = np.zeros((B, H + 2, W + 2, C), dtype=g.dtype)
        k = 0
        for i in range(3):
            for j in range(3):
                gp[:, i:i + H, j:j + W, :] += g[..., k * C:(k + 1) * C]
                k += 1
        return (gp[:, 1:-1, 1:-1, :].copy(),)

    return make_result(out, (x,), bw, "unfold3x3")


# ---------------------------------------------------------------- operator binding

Tensor.__add__ = lambda a, b: add(a, b)
Tensor.__radd__ = lambda a, b: add(b, a)
Tensor.__sub__ = lambda a, b: sub(a, b)
Tensor.__rsub__ = lambda a, b: sub(b, a)
Tensor.__mul__ = lambda a, b: mul(a, b)
Tensor.__rmul__ = lambda a, b: mul(b, a)
Tensor.__truediv__ = lambda a, b: div(a, b)
Tensor.__rtruediv__ = lambda a, b: div(b, a)
Tensor.__neg__ = lambda a: neg(a)
Tensor.__pow__ = lambda a, k: power(a, k)
Tensor.__matmul__ = lambda a, b: matmul(a, b)
Tensor.__getitem__ = lambda a, idx: getitem(a, idx)
Tensor.sum = lambda a, axis=None, keepdims=False: sum(a, axis, keepdims)
Tensor.mean = lambda a, axis=None, keepdims=False: mean(a, axis, keepdims)
Tensor.reshape = lambda a, *shape: reshape(a, shape[0] if len(shape) == 1 else shape)
Tensor.transpose = lambda a, *axes: transpose(a, axes[0] if len(axes) == 1 else axes)
