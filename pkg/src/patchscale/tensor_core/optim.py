from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay.

    ``params`` maps names to tensors; names listed in ``no_decay`` skip the
    decay term (biases, norms, positional embeddings by convention).
    """

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.05, no_decay=()):
        self.params = dict(params)
        self.no_decay = set(no_decay)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                                weight_decay=weight_decay)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        st = self.state
        lr = st.lr if lr is None else lr
        missing = [n for n, p in self.params.items() if p.grad is None]
        if missing:
            raise RuntimeError(f"adamw_step: no gradient for {missing[:5]}"
                               + (" ..." if len(missing) > 5 else ""))
        st.t += 1
        b1, b2 = st.beta1, st.beta2
        c1 = 1.0 - b1 ** st.t
        c2 = 1.0 - b2 ** st.t
        for name, p in self.params.items():
            g = p.grad
            m, v = st.m[name], st.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if st.weight_decay and name not in self.no_decay:
                p.data *= 1.0 - lr * st.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)


def adamw_step(params: dict[str, Tensor], state: AdamWState, no_decay=()) -> AdamWState:
    """Functional form: one AdamW update of ``params`` in place using ``state``."""
    opt = AdamW.__new__(AdamW)
    opt.params = dict(params)
    opt.no_decay = set(no_decay)
    for name, p in opt.params.items():
        state.m.setdefault(name, np.zeros_like(p.data))
        state.v.setdefault(name, np.zeros_like(p.data))
    opt.state = state
    opt.step()
    return state
