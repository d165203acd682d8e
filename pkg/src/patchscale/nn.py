"""Parameter containers with name-seeded initialization."""
from __future__ import annotations

import zlib

import numpy as np

from .tensor_core import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Each parameter draws from its own stream keyed by (seed, name)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Module:
    """Ordered registry of parameters and child modules.

    Parameters are created empty; :meth:`initialize` fills each from a
    generator keyed on the model seed and the parameter's full dotted name, so
    two modules holding a parameter with the same name get the same values.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._inits: dict[str, tuple] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, shape, init=("trunc_normal", 0.02), decay: bool = True) -> Tensor:
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self._params[name] = t
        self._inits[name] = (init, decay)
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for cname, c in self._children.items():
            out.update(c.named_parameters(f"{prefix}{cname}."))
        return out

    def _named_inits(self, prefix: str = "") -> dict[str, tuple]:
        out = {prefix + k: v for k, v in self._inits.items()}
        for cname, c in self._children.items():
            out.update(c._named_inits(f"{prefix}{cname}."))
        return out

    def no_decay_names(self) -> list[str]:
        return [n for n, (_, decay) in self._named_inits().items() if not decay]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.named_parameters().values()))

    def initialize(self, seed: int, dtype=np.float32) -> "Module":
        params = self.named_parameters()
        for name, (init, _) in self._named_inits().items():
            p = params[name]
            kind = init[0]
            if kind == "trunc_normal":
                val = trunc_normal(param_rng(seed, name), p.shape, init[1])
            elif kind == "zeros":
                val = np.zeros(p.shape)
            elif kind == "ones":
                val = np.ones(p.shape)
            elif kind == "uniform":
                val = param_rng(seed, name).uniform(init[1], init[2], size=p.shape)
            elif callable(kind):
                val = kind(param_rng(seed, name), p.shape)
            else:
                raise ValueError(f"unknown initializer {kind!r} for {name}")
            p.data = np.ascontiguousarray(val, dtype=dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in params.items():
            if tuple(state[k].shape) != p.shape:
                raise ValueError(f"{k}: checkpoint shape {state[k].shape} != model shape {p.shape}")
            p.data = np.ascontiguousarray(state[k], dtype=p.dtype)

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for c in self._children.values():
            c.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None
