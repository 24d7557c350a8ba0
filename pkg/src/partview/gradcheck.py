"""Central-difference gradient checking for recorded computations."""

from __future__ import annotations

import numpy as np

from .optim import ParamStore
from .tensor import Tensor, backward


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(f, params, h: float = 1e-5, max_coords: int = 24,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable that rebuilds the forward graph from
    the current parameter values and returns a scalar Tensor.  ``params``
    is a ParamStore or an iterable of (name, Tensor) pairs.  For tensors
    larger than ``max_coords`` a random coordinate subset is probed.
    """
    if isinstance(params, ParamStore):
        entries = list(params.items())
    else:
        entries = list(params)
    if rng is None:
        rng = np.random.default_rng(0)

    for _, p in entries:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in entries}

    worst = 0.0
    for name, p in entries:
        flat = p.data.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        for idx in coords:
            saved = flat[idx]
            flat[idx] = saved + h
            up = float(f().data)
            flat[idx] = saved - h
            down = float(f().data)
            flat[idx] = saved
            numeric = (up - down) / (2.0 * h)
            err = relative_error(float(analytic[name].reshape(-1)[idx]), numeric)
            worst = max(worst, err)
    return worst


def check_tensors(f, tensors: list[tuple[str, Tensor]], **kw) -> float:
    """grad_check over a plain list of named tensors."""
    return grad_check(f, tensors, **kw)
