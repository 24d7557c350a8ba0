"""Named parameter collection and the Adam update rule."""

from __future__ import annotations

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class ParamStore:
    """Ordered, named collection of learnable tensors plus optimizer state.

    Adam moments and per-parameter step counters live here so that
    checkpointing and phase-frozen training can treat them uniformly.
    ``subset`` returns a filtered view that shares all underlying state,
    which is how the alternating trainer updates one branch at a time.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, value: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already registered")
        if not value.requires_grad:
            raise ContractError(f"parameter {name!r} must require gradients")
        self._params[name] = value
        self._m[name] = np.zeros_like(value.data)
        self._v[name] = np.zeros_like(value.data)
        self._t[name] = 0
        return value

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def subset(self, prefix: str) -> "ParamStore":
        view = ParamStore.__new__(ParamStore)
        view._params = _PrefixView(self._params, prefix)
        view._m = _PrefixView(self._m, prefix)
        view._v = _PrefixView(self._v, prefix)
        view._t = _PrefixView(self._t, prefix)
        return view

    # -- persistence hooks -------------------------------------------------

    def moment_arrays(self):
        """(name, array) pairs for every Adam moment, for checkpointing."""
        for name in self._params:
            yield f"adam.m.{name}", self._m[name]
            yield f"adam.v.{name}", self._v[name]

    def step_counts(self) -> dict[str, int]:
        return {name: self._t[name] for name in self._params}

    def load_moments(self, name: str, kind: str, value: np.ndarray) -> None:
        target = self._m if kind == "m" else self._v
        if name not in target:
            raise ContractError(f"unknown optimizer moment for parameter {name!r}")
        target[name] = value.astype(np.float64)

    def set_step_counts(self, counts: dict[str, int]) -> None:
        for name, t in counts.items():
            if name in self._t:
                self._t[name] = int(t)

    def round_to_single_precision(self) -> None:
        """Force parameters and moments through float32, in place.

        Applied at every checkpoint boundary so a resumed run (which reads
        float32 payloads) continues bit-identically to an unbroken one.
        """
        for name, p in self._params.items():
            p.data[...] = p.data.astype(np.float32).astype(np.float64)
            self._m[name] = self._m[name].astype(np.float32).astype(np.float64)
            self._v[name] = self._v[name].astype(np.float32).astype(np.float64)


class _PrefixView(dict):
    """Filtered live view over a backing dict, keyed by name prefix."""

    def __init__(self, backing: dict, prefix: str):
        super().__init__()
        self._backing = backing
        self._prefix = prefix

    def _keys(self):
        return [k for k in self._backing if k.startswith(self._prefix)]

    def __iter__(self):
        return iter(self._keys())

    def __len__(self):
        return len(self._keys())

    def __contains__(self, key):
        return key in self._backing and key.startswith(self._prefix)

    def __getitem__(self, key):
        if not key.startswith(self._prefix):
            raise KeyError(key)
        return self._backing[key]

    def __setitem__(self, key, value):
        self._backing[key] = value

    def values(self):
        return [self._backing[k] for k in self._keys()]

    def items(self):
        return [(k, self._backing[k]) for k in self._keys()]


def adam_step(params: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update over every parameter in ``params``.

    A parameter whose gradient buffer is missing raises; a parameter whose
    gradient is exactly zero everywhere is skipped outright (no moment
    decay), so untouched branches stay bit-identical.
    """
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
        g = p.grad
        if not np.any(g):
            continue
        t = params._t[name] + 1
        params._t[name] = t
        m = params._m[name]
        v = params._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
