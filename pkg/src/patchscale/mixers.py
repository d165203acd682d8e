"""Token mixers (self-attention, gated linear scan), the MLP channel mixer and the residual block.

The scan is a simplified selective recurrence standing in for a Mamba mixer::

    h_t = a_t * h_{t-1} + b_t * u_t        y_t = c_t * h_t

with per-token gates ``a`` (decay, sigmoid-bounded), ``b`` and ``c`` computed
from the token, and ``u`` a projection of the token into the state space.  No
discretization step and no hardware-aware kernel; cost is linear in L.
"""
from __future__ import annotations

import contextlib
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc
from .nn import Module
from .tensor_core import Tensor
from .tensor_core.tensor import make_result as _make
from .validation import ConfigError

#: work counters: "attention_score" counts multiply-adds in QK^T, "scan" counts recurrence steps x state
OP_COUNTS: Counter = Counter()


@contextlib.contextmanager
def count_ops():
    OP_COUNTS.clear()
    yield OP_COUNTS


@dataclass(frozen=True)
class BlockConfig:
    mixer_kind: str
    embed_dim: int
    mlp_dim: int
    drop_path_rate: float = 0.0
    heads: int = 1
    state_dim: int = 64
    direction: str = "bidirectional"

    def __post_init__(self):
        if self.mixer_kind not in ("attention", "scan"):
            raise ConfigError(f"mixer_kind must be 'attention' or 'scan', got {self.mixer_kind!r}")
        if self.mixer_kind == "attention" and (self.heads < 1 or self.embed_dim % self.heads):
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.direction not in ("forward", "bidirectional"):
            raise ConfigError(f"direction must be 'forward' or 'bidirectional', got {self.direction!r}")


# ---------------------------------------------------------------- attention

class AttentionParams(Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"embed_dim {dim} is not divisible by heads {heads}")
        self.heads = heads
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w{name}", self.param(f"w{name}", (dim, dim)))
            setattr(self, f"b{name}", self.param(f"b{name}", (dim,), ("zeros",), decay=False))


def attention_forward(tokens: Tensor, p: AttentionParams) -> Tensor:
    """Multi-head softmax(QK^T / sqrt(d)) V without masking; tokens [B, L, D] or [L, D]."""
    single = tokens.ndim == 2
    if single:
        tokens = tc.reshape(tokens, (1,) + tokens.shape)
    B, L, D = tokens.shape
    h = p.heads
    if D % h:
        raise ConfigError(f"embed_dim {D} is not divisible by heads {h}")
    d = D // h

    def split(w, b):
        x = tc.reshape(tc.linear(tokens, w, b), (B, L, h, d))
        return tc.transpose(x, (0, 2, 1, 3))

    q = split(p.wq, p.bq)
    k = split(p.wk, p.bk)
    v = split(p.wv, p.bv)
    OP_COUNTS["attention_score"] += B * h * L * L * d
    out = tc.attention_core(q, k, v, 1.0 / math.sqrt(d))
    out = tc.reshape(tc.transpose(out, (0, 2, 1, 3)), (B, L, D))
    out = tc.linear(out, p.wo, p.bo)
    return tc.reshape(out, (L, D)) if single else out


# ---------------------------------------------------------------- scan

def linear_scan(a: Tensor, x: Tensor, reverse: bool = False) -> Tensor:
    """h_t = a_t * h_{t-1} + x_t along axis -2 of [..., L, S]; h_{-1} = 0.

    The backward pass is the adjoint recurrence run in the opposite
    direction: g_t = dh_t + a_{t+1} g_{t+1}, dx_t = g_t, da_t = g_t h_{t-1}.
    """
    if a.shape != x.shape:
        raise ValueError(f"scan gates {a.shape} and inputs {x.shape} differ")
    shape = x.shape
    L = shape[-2]
    ad = np.moveaxis(a.data, -2, 0)
    xd = np.moveaxis(x.data, -2, 0)
    if reverse:
        ad, xd = ad[::-1], xd[::-1]
    ad = np.ascontiguousarray(ad)
    xd = np.ascontiguousarray(xd)
    hs = np.empty_like(xd)
    h = np.zeros_like(xd[0])
    for t in range(L):
        h = ad[t] * h
        h += xd[t]
        hs[t] = h
    OP_COUNTS["scan"] += int(np.prod(shape))

    def restore(z):
        if reverse:
            z = z[::-1]
        return np.ascontiguousarray(np.moveaxis(z, 0, -2))

    def bw(g):
        gd = np.moveaxis(g, -2, 0)
        if reverse:
            gd = gd[::-1]
        gx = np.empty_like(hs)
        acc = np.zeros_like(hs[0])
        for t in range(L - 1, -1, -1):
            if t < L - 1:
                acc = acc * ad[t + 1]
            acc = acc + gd[t]
            gx[t] = acc
        ga = np.zeros_like(hs)
        ga[1:] = gx[1:] * hs[:-1]
        return restore(ga), restore(gx)

    return _make(restore(hs), (a, x), bw, "linear_scan")


def selective_scan(u: Tensor, a: Tensor, b: Tensor, c: Tensor, reverse: bool = False) -> Tensor:
    """y_t = c_t * h_t with h_t = a_t * h_{t-1} + b_t * u_t (all [..., L, S])."""
    return c * linear_scan(a, b * u, reverse=reverse)


def _decay_bias(rng: np.random.Generator, shape) -> np.ndarray:
    # per-channel memory timescales log-uniform in [2, 2048] tokens
    tau = np.exp(rng.uniform(np.log(2.0), np.log(2048.0), size=shape))
    a = np.exp(-1.0 / tau)
    return np.log(a / (1.0 - a))


class ScanParams(Module):
    def __init__(self, dim: int, state_dim: int = 64, direction: str = "bidirectional"):
        super().__init__()
        if direction not in ("forward", "bidirectional"):
            raise ConfigError(f"direction must be 'forward' or 'bidirectional', got {direction!r}")
        self.state_dim = state_dim
        self.direction = direction
        S = state_dim
        self.w_in = self.param("w_in", (dim, S))
        self.b_in = self.param("b_in", (S,), ("zeros",), decay=False)
        self.dirs = ["fwd"] if direction == "forward" else ["fwd", "bwd"]
        for tag in self.dirs:
            self.param(f"{tag}_wa", (dim, S))
            self.param(f"{tag}_ba", (S,), (_decay_bias,), decay=False)
            self.param(f"{tag}_wb", (dim, S))
            self.param(f"{tag}_bb", (S,), ("ones",), decay=False)
            self.param(f"{tag}_wc", (dim, S))
            self.param(f"{tag}_bc", (S,), ("ones",), decay=False)
        self.w_out = self.param("w_out", (S, dim))
        self.b_out = self.param("b_out", (dim,), ("zeros",), decay=False)

    def gates(self, tokens: Tensor, tag: str):
        P = self._params
        a = tc.sigmoid(tc.linear(tokens, P[f"{tag}_wa"], P[f"{tag}_ba"]))
        b = tc.linear(tokens, P[f"{tag}_wb"], P[f"{tag}_bb"])
        c = tc.linear(tokens, P[f"{tag}_wc"], P[f"{tag}_bc"])
        return a, b, c


def scan_forward(tokens: Tensor, p: ScanParams) -> Tensor:
    """Gated linear recurrence mixer; the backward direction has its own gates and runs on the reversed sequence."""
    u = tc.linear(tokens, p.w_in, p.b_in)
    y = None
    for tag in p.dirs:
        a, b, c = p.gates(tokens, tag)
        yd = selective_scan(u, a, b, c, reverse=(tag == "bwd"))
        y = yd if y is None else y + yd
    return tc.linear(y, p.w_out, p.b_out)


# ---------------------------------------------------------------- channel mixer and block

class MLP(Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w1 = self.param("w1", (dim, hidden))
        self.b1 = self.param("b1", (hidden,), ("zeros",), decay=False)
        self.w2 = self.param("w2", (hidden, dim))
        self.b2 = self.param("b2", (dim,), ("zeros",), decay=False)


def mlp_forward(tokens: Tensor, w1: Tensor, w2: Tensor, b1: Tensor | None = None, b2: Tensor | None = None) -> Tensor:
    if tokens.shape[-1] != w1.shape[0] or w1.shape[1] != w2.shape[0] or w2.shape[1] != tokens.shape[-1]:
        raise ValueError(f"mlp shape mismatch: tokens {tokens.shape}, W1 {w1.shape}, W2 {w2.shape}")
    return tc.linear(tc.gelu(tc.linear(tokens, w1, b1)), w2, b2)


class Block(Module):
    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        D = cfg.embed_dim
        self.ln1_g = self.param("ln1_g", (D,), ("ones",), decay=False)
        self.ln1_b = self.param("ln1_b", (D,), ("zeros",), decay=False)
        if cfg.mixer_kind == "attention":
            self.mixer = self.child("attn", AttentionParams(D, cfg.heads))
        else:
            self.mixer = self.child("scan", ScanParams(D, cfg.state_dim, cfg.direction))
        self.ln2_g = self.param("ln2_g", (D,), ("ones",), decay=False)
        self.ln2_b = self.param("ln2_b", (D,), ("zeros",), decay=False)
        self.mlp = self.child("mlp", MLP(D, cfg.mlp_dim))


def block_forward(tokens: Tensor, cfg: BlockConfig, params: Block,
                  rng: np.random.Generator | None = None, training: bool = False,
                  eps: float = 1e-6) -> Tensor:
    """Pre-norm residual block: x + DropPath(Mixer(LN(x))), then x + DropPath(MLP(LN(x)))."""
    expected = AttentionParams if cfg.mixer_kind == "attention" else ScanParams
    if not isinstance(params.mixer, expected):
        raise ConfigError(f"block config asks for {cfg.mixer_kind} but params hold {type(params.mixer).__name__}")
    mix = attention_forward if cfg.mixer_kind == "attention" else scan_forward
    x = tokens
    y = mix(tc.layernorm(x, params.ln1_g, params.ln1_b, eps), params.mixer)
    x = x + tc.drop_path(y, cfg.drop_path_rate, rng, training)
    m = params.mlp
    y = mlp_forward(tc.layernorm(x, params.ln2_g, params.ln2_b, eps), m.w1, m.w2, m.b1, m.b2)
    return x + tc.drop_path(y, cfg.drop_path_rate, rng, training)
