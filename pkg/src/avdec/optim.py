"""Named parameters and SGD with momentum.

Parameters live in a flat name -> Parameter store. Learning rates are
resolved per parameter by longest matching name prefix, which is how the
pretrained-vs-fresh split is expressed (pretrained parts keep a small rate,
newly initialized parts a larger one).
"""

from __future__ import annotations

import numpy as np

from avdec.autodiff import Tensor


class Parameter(Tensor):
    """A leaf tensor with persistent gradient and momentum buffers."""

    def __init__(self, data, name=""):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.velocity = np.zeros_like(self.data)
        self.name = name

    __slots__ = ("velocity", "name")


class ParameterStore:
    """Flat mapping of dotted/slashed names to Parameters."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def add(self, name, data):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = Parameter(data, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def subset(self, prefix):
        return {n: p for n, p in self._params.items() if n.startswith(prefix)}

    def zero_grad(self):
        for p in self._params.values():
            p.grad[...] = 0.0

    def state_dict(self):
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state_dict(self, state, strict=True):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if strict and (missing or extra):
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, arr in state.items():
            if n not in self._params:
                continue
            p = self._params[n]
            if p.data.shape != arr.shape:
                raise ValueError(f"shape mismatch for {n!r}: {p.data.shape} vs {arr.shape}")
            p.data[...] = arr
        return sorted(missing), sorted(extra)

    def num_values(self):
        return sum(p.data.size for p in self._params.values())


def resolve_lr(name, lr_map, default):
    """Longest-prefix match of a parameter name against an lr map."""
    best_len = -1
    best = default
    for prefix, lr in lr_map.items():
        if name.startswith(prefix) and len(prefix) > best_len:
            best_len = len(prefix)
            best = lr
    return best


def sgd_momentum_step(store, lr_map, default_lr, momentum=0.8, skip=()):
    """v = momentum*v + g; p -= lr*v; all gradients zeroed afterward.

    Parameters whose name starts with an entry of `skip` keep their value
    and momentum untouched (frozen during a phase).
    """
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        if any(name.startswith(s) for s in skip):
            continue
        lr = resolve_lr(name, lr_map, default_lr)
        if lr == 0.0:
            continue
        p.velocity *= momentum
        p.velocity += p.grad
        p.data -= np.float32(lr) * p.velocity
    store.zero_grad()
