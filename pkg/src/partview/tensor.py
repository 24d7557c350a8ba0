"""Reverse-mode automatic differentiation over dense float64 arrays.

Every learnable computation in the package is expressed through the
operations in this module.  The graph is define-by-run: each operation
records its parents and a backward closure on the output tensor, and
``backward`` replays the closures in reverse topological order.  Graphs
are rebuilt on every forward pass; nothing is reused across steps.

Conventions fixed here and relied on by the rest of the package:

* all data is float64; gradients accumulate additively across uses;
* max-style reductions route the gradient to the lowest flat index
  among tied maxima;
* ``cross_entropy`` clamps probabilities at 1e-12 before the log.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "slice_rows",
    "broadcast_to",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "log",
    "exp",
    "clamp_min",
    "absolute",
    "softmax",
    "conv2d",
    "max_pool2d",
    "reduce_max",
    "reduce_sum",
    "cross_entropy",
    "backward",
]


class Tensor:
    """N-dimensional float64 value with an optional gradient accumulator.

    ``requires_grad`` tensors own a same-shape ``grad`` buffer that starts
    at zero, so a tensor that never appears on the path from a loss keeps
    an all-zero gradient after ``backward``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # small amount of operator sugar; all semantics live in the functions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = True
        out.grad = None  # allocated on demand during backward
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, value: np.ndarray, own: bool) -> None:
    """Accumulate ``value`` into ``t.grad``.

    ``own=True`` promises ``value`` is a fresh array (or a view of one)
    that nothing else will mutate, so the first accumulation can adopt it
    without copying.  Pass ``own=False`` for views of the upstream
    gradient or broadcast results.
    """
    if t.grad is None:
        t.grad = value if own else np.array(value)
    else:
        t.grad += value


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors; d a = g @ bᵀ, d b = aᵀ @ g."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._backward_fn is not None:
            _accum(a, g @ b.data.T, own=True)
        if b.requires_grad or b._backward_fn is not None:
            _accum(b, a.data.T @ g, own=True)

    return _node(out_data, (a, b), backward_fn)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    out_data = a.data.T.copy()

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g.T, own=False)

    return _node(out_data, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    out_data = a.data.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g.reshape(a.data.shape), own=False)

    return _node(out_data, (a,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back to the inputs."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._backward_fn is not None:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)], own=False)

    return _node(out_data, tuple(ts), backward_fn)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor by index (repeats allowed); the gradient
    scatter-adds back, so repeated rows accumulate."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"gather_rows needs a 2-D tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise DimensionError(f"gather_rows indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DimensionError(f"gather_rows index out of range for {a.shape}")
    out_data = a.data[idx]

    def backward_fn(g: np.ndarray) -> None:
        a._ensure_grad()
        np.add.at(a.grad, idx, g)

    return _node(out_data, (a,), backward_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 2-D tensor, kept 2-D."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"slice_rows needs a 2-D tensor, got {a.shape}")
    if not (0 <= start < stop <= a.shape[0]):
        raise DimensionError(f"row range [{start},{stop}) out of bounds for {a.shape}")
    out_data = a.data[start:stop].copy()

    def backward_fn(g: np.ndarray) -> None:
        a._ensure_grad()
        a.grad[start:stop] += g

    return _node(out_data, (a,), backward_fn)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Numpy-broadcast ``a`` to ``shape``; gradient sums over expanded axes."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out_data = np.broadcast_to(a.data, shape).copy()
    except ValueError as e:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from e

    def backward_fn(g: np.ndarray) -> None:
        reduced = g
        extra = reduced.ndim - a.data.ndim
        if extra:
            reduced = reduced.sum(axis=tuple(range(extra)))
        keep = tuple(i for i, s in enumerate(a.data.shape) if s == 1 and reduced.shape[i] != 1)
        if keep:
            reduced = reduced.sum(axis=keep, keepdims=True)
        _accum(a, reduced, own=reduced is not g)

    return _node(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# elementwise suite


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} operand shapes differ: {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("add", a, b)
    out_data = a.data + b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._backward_fn is not None:
            _accum(a, g, own=False)
        if b.requires_grad or b._backward_fn is not None:
            _accum(b, g, own=False)

    return _node(out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("sub", a, b)
    out_data = a.data - b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._backward_fn is not None:
            _accum(a, g, own=False)
        if b.requires_grad or b._backward_fn is not None:
            _accum(b, -g, own=True)

    return _node(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape("mul", a, b)
    out_data = a.data * b.data

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad or a._backward_fn is not None:
            _accum(a, g * b.data, own=True)
        if b.requires_grad or b._backward_fn is not None:
            _accum(b, g * a.data, own=True)

    return _node(out_data, (a, b), backward_fn)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out_data = a.data * c

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * c, own=True)

    return _node(out_data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * (a.data > 0.0), own=True)

    return _node(out_data, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * out_data * (1.0 - out_data), own=True)

    return _node(out_data, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * (1.0 - out_data * out_data), own=True)

    return _node(out_data, (a,), backward_fn)


def log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log of non-positive value")
    out_data = np.log(a.data)

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g / a.data, own=True)

    return _node(out_data, (a,), backward_fn)


def exp(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * out_data, own=True)

    return _node(out_data, (a,), backward_fn)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    a = _as_tensor(a)
    lo = float(lo)
    out_data = np.maximum(a.data, lo)

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * (a.data >= lo), own=True)

    return _node(out_data, (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    """|a| with subgradient sign(a); sign(0) == 0."""
    a = _as_tensor(a)
    out_data = np.abs(a.data)

    def backward_fn(g: np.ndarray) -> None:
        _accum(a, g * np.sign(a.data), own=True)

    return _node(out_data, (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Shift-invariant softmax along ``axis``; slices sum to 1."""
    a = _as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax input contains non-finite values")
    if a.data.shape == () or a.data.shape[axis] < 1:
        raise DimensionError(f"softmax axis {axis} empty for shape {a.shape}")
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g: np.ndarray) -> None:
        inner = np.sum(g * out_data, axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner), own=True)

    return _node(out_data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv_patch_index(h_out: int, w_out: int, k: int, stride: int):
    # row/col gather indices of shape (h_out*w_out, k, k) into the padded image
    r0 = np.arange(h_out) * stride
    c0 = np.arange(w_out) * stride
    rows = (r0[:, None, None, None] + np.arange(k)[None, None, :, None])  # (h_out,1,k,1)
    cols = (c0[None, :, None, None] + np.arange(k)[None, None, None, :])  # (1,w_out,1,k)
    rows = np.broadcast_to(rows, (h_out, w_out, k, k)).reshape(-1, k, k)
    cols = np.broadcast_to(cols, (h_out, w_out, k, k)).reshape(-1, k, k)
    return rows, cols


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of (C_in,H,W) with (C_out,C_in,k,k) filters."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects (C,H,W) and (O,C,k,k), got {x.shape} and {w.shape}")
    c_in, h, wid = x.shape
    c_out, c_in_w, k, k2 = w.shape
    if k != k2:
        raise DimensionError(f"conv2d kernel must be square, got {w.shape}")
    if c_in != c_in_w:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    stride, pad = int(stride), int(pad)
    if stride < 1:
        raise DimensionError(f"conv2d stride must be >= 1, got {stride}")
    if k > h + 2 * pad or k > wid + 2 * pad:
        raise DimensionError(f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{wid + 2 * pad}")
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wid + 2 * pad - k) // stride + 1

    padded = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    rows, cols = _conv_patch_index(h_out, w_out, k, stride)
    # cols matrix: (c_in*k*k, h_out*w_out)
    patches = padded[:, rows, cols]  # (c_in, P, k, k)
    col_mat = patches.transpose(0, 2, 3, 1).reshape(c_in * k * k, -1)
    w_mat = w.data.reshape(c_out, c_in * k * k)
    out_data = (w_mat @ col_mat).reshape(c_out, h_out, w_out)

    def backward_fn(g: np.ndarray) -> None:
        g_mat = g.reshape(c_out, -1)
        if w.requires_grad or w._backward_fn is not None:
            _accum(w, (g_mat @ col_mat.T).reshape(w.data.shape), own=True)
        if x.requires_grad or x._backward_fn is not None:
            col_grad = (w_mat.T @ g_mat).reshape(c_in, k, k, -1).transpose(0, 3, 1, 2)
            pad_grad = np.zeros((c_in, h + 2 * pad, wid + 2 * pad))
            np.add.at(pad_grad, (slice(None), rows, cols), col_grad)
            _accum(x, pad_grad[:, pad:pad + h, pad:pad + wid] if pad else pad_grad, own=True)

    return _node(out_data, (x, w), backward_fn)


def max_pool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Per-channel k×k max pooling; gradient routes to the argmax cell only."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"max_pool2d expects (C,H,W), got {x.shape}")
    c, h, wid = x.shape
    k, stride = int(k), int(stride)
    if k > h or k > wid:
        raise DimensionError(f"pool window {k} does not fit input {h}x{wid}")
    h_out = (h - k) // stride + 1
    w_out = (wid - k) // stride + 1
    rows, cols = _conv_patch_index(h_out, w_out, k, stride)
    windows = x.data[:, rows, cols].reshape(c, h_out * w_out, k * k)
    # first occurrence of the max = lowest flat input index within the window
    arg = np.argmax(windows, axis=2)
    out_data = np.take_along_axis(windows, arg[:, :, None], axis=2)[:, :, 0].reshape(c, h_out, w_out)
    arg_r = rows.reshape(-1, k * k)[np.arange(h_out * w_out)[None, :], arg]
    arg_c = cols.reshape(-1, k * k)[np.arange(h_out * w_out)[None, :], arg]

    def backward_fn(g: np.ndarray) -> None:
        flat = np.zeros_like(x.data)
        ch = np.repeat(np.arange(c), h_out * w_out)
        np.add.at(flat, (ch, arg_r.ravel(), arg_c.ravel()), g.reshape(c, -1).ravel())
        _accum(x, flat, own=True)

    return _node(out_data, (x,), backward_fn)


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(sorted(a % ndim for a in axis))


def reduce_max(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Max over ``axis``; ties give the gradient to the lowest flat index."""
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.data.ndim)
    for a in axes:
        if x.data.shape[a] == 0:
            raise DimensionError(f"reduce_max over empty axis {a} of shape {x.shape}")
    keep = tuple(i for i in range(x.data.ndim) if i not in axes)
    moved = np.transpose(x.data, keep + axes)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,)) if keep else moved.reshape(-1)
    arg = np.argmax(flat, axis=-1)
    out_flat = np.take_along_axis(flat, np.expand_dims(arg, -1), axis=-1)[..., 0]
    out_data = out_flat.reshape(lead)
    if keepdims:
        shape = list(x.data.shape)
        for a in axes:
            shape[a] = 1
        out_data = out_data.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        mask = np.zeros(flat.shape)
        np.put_along_axis(mask, np.expand_dims(arg, -1), g.reshape(lead + (1,)) if keep else g.reshape(1), axis=-1)
        grad_moved = mask.reshape(moved.shape)
        inv = np.argsort(keep + axes)
        _accum(x, np.transpose(grad_moved, inv), own=True)

    return _node(out_data, (x,), backward_fn)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _normalize_axes(axis, x.data.ndim)
    for a in axes:
        if x.data.shape[a] == 0:
            raise DimensionError(f"reduce_sum over empty axis {a} of shape {x.shape}")
    out_data = np.sum(x.data, axis=axes if axes else None, keepdims=keepdims)

    def backward_fn(g: np.ndarray) -> None:
        gg = g
        if not keepdims:
            shape = list(x.data.shape)
            for a in axes:
                shape[a] = 1
            gg = g.reshape(shape)
        _accum(x, np.broadcast_to(gg, x.data.shape), own=False)

    return _node(out_data, (x,), backward_fn)


# ---------------------------------------------------------------------------
# losses


_CE_EPS = 1e-12


def cross_entropy(p: Tensor, p_true: Tensor) -> Tensor:
    """-Σ p_true·log(p) over all entries, with p clamped below at 1e-12.

    ``p`` must already be a probability vector (sum 1 within 1e-6);
    ``p_true`` a one-hot or simplex vector of the same shape.
    """
    p, p_true = _as_tensor(p), _as_tensor(p_true)
    if p.shape != p_true.shape:
        raise DimensionError(f"cross_entropy shapes differ: {p.shape} vs {p_true.shape}")
    if abs(float(np.sum(p.data)) - 1.0) > 1e-6:
        raise ContractError(f"cross_entropy: p sums to {np.sum(p.data):.9f}, expected 1")
    if np.any(p_true.data < -1e-12) or abs(float(np.sum(p_true.data)) - 1.0) > 1e-6:
        raise ContractError("cross_entropy: p_true is not a simplex vector")
    clamped = np.maximum(p.data, _CE_EPS)
    out_data = np.asarray(-np.sum(p_true.data * np.log(clamped)))

    def backward_fn(g: np.ndarray) -> None:
        gs = float(g)
        if p.requires_grad or p._backward_fn is not None:
            _accum(p, gs * (-(p_true.data / clamped) * (p.data >= _CE_EPS)), own=True)
        if p_true.requires_grad or p_true._backward_fn is not None:
            _accum(p_true, gs * (-np.log(clamped)), own=True)

    return _node(out_data, (p, p_true), backward_fn)


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Populate gradients of every tensor reachable from ``loss``.

    Gradients accumulate additively: a tensor used on two paths receives
    the sum of both path gradients.  Call ``zero_grad`` between passes.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    # iterative post-order topological sort over recorded parents
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)
