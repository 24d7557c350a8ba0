"""The packaged gradient-check suite: every differentiable operation plus
the composed detection-loss and classification paths, all against central
differences at h=1e-5 in float64.

Runs on a deliberately tiny architecture so the whole suite stays well
under the two-minute budget on one core.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .attention import (
    AttentionMode,
    classification_loss,
    init_attention_params,
    one_hot,
    shape_forward,
)
from .detector import (
    backbone_forward,
    detection_loss,
    gsp_scores,
    head_forward,
    init_detector_params,
    roi_pool_batch,
    score_sampled_anchors,
    AnchorLayout,
)
from .gradcheck import grad_check
from .optim import ParamStore
from .render import BBox
from .tensor import Tensor

TOLERANCE = 1e-4


def _elementary_checks(rng) -> dict[str, float]:
    out = {}
    x = T.tensor(rng.normal(size=(4, 5)), requires_grad=True)
    mix = rng.normal(size=(4, 5))
    unary = {
        "relu": T.relu,
        "sigmoid": T.sigmoid,
        "tanh": T.tanh,
        "absolute": T.absolute,
        "exp": T.exp,
        "softmax": lambda t: T.softmax(t, axis=1),
        "reduce_max": lambda t: T.reduce_max(t, axis=1, keepdims=True),
        "max_pool2d": None,  # handled below
    }
    for name, op in unary.items():
        if op is None:
            continue
        def f(op=op):
            y = op(x)
            m = mix[:, :y.shape[1]] if y.data.ndim == 2 else mix
            return T.reduce_sum(T.mul(y, T.tensor(np.broadcast_to(m[:, :y.shape[1]], y.shape).copy())))
        out[name] = grad_check(f, [(name, x)], max_coords=12, rng=rng)

    a = T.tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = T.tensor(rng.normal(size=(4, 2)), requires_grad=True)
    m2 = rng.normal(size=(3, 2))
    out["matmul"] = grad_check(
        lambda: T.reduce_sum(T.mul(T.matmul(a, b), T.tensor(m2))),
        [("a", a), ("b", b)], max_coords=20, rng=rng)

    xi = T.tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    w = T.tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
    m3 = rng.normal(size=(3, 3, 3))
    out["conv2d"] = grad_check(
        lambda: T.reduce_sum(T.mul(T.conv2d(xi, w, stride=2, pad=1), T.tensor(m3))),
        [("x", xi), ("w", w)], max_coords=20, rng=rng)

    m4 = rng.normal(size=(2, 3, 3))
    out["max_pool2d"] = grad_check(
        lambda: T.reduce_sum(T.mul(T.max_pool2d(xi, 2, 2), T.tensor(m4))),
        [("x", xi)], max_coords=20, rng=rng)

    probs = rng.random(5) + 0.1
    probs /= probs.sum()
    p = T.tensor(probs, requires_grad=True)
    target = np.zeros(5)
    target[1] = 1.0
    # direct probability-space check with a small step to stay on the simplex
    p.zero_grad()
    T.backward(T.cross_entropy(p, T.tensor(target)))
    h = 1e-7
    worst = 0.0
    for i in range(5):
        saved = p.data[i]
        p.data[i] = saved + h
        up = float(T.cross_entropy(Tensor(p.data), T.tensor(target)).data)
        p.data[i] = saved - h
        down = float(T.cross_entropy(Tensor(p.data), T.tensor(target)).data)
        p.data[i] = saved
        numeric = (up - down) / (2 * h)
        denom = max(1e-8, abs(p.grad[i]) + abs(numeric))
        worst = max(worst, abs(p.grad[i] - numeric) / denom)
    out["cross_entropy"] = worst
    return out


def _detection_path_check(rng) -> float:
    store = ParamStore()
    init_detector_params(store, 8, 16, rng)
    layout = AnchorLayout(16, 2, [1, 2], ["1:1", "2:1"], stride=8.0)
    image = rng.random((3, 16, 16))
    idx = np.arange(len(layout.anchors))
    labels = np.zeros(len(idx), dtype=np.int64)
    labels[:3] = 1
    t_star = rng.normal(size=(3, 4)) * 0.3

    def f():
        fm = backbone_forward(store, Tensor(image))
        p, reg = score_sampled_anchors(store, fm, layout, idx)
        return detection_loss(p, labels, T.slice_rows(reg, 0, 3), t_star)

    return grad_check(f, store, max_coords=4, rng=rng)


def _classification_path_check(rng) -> float:
    """Backbone -> RoI pooling -> part/view attention -> classifier loss."""
    store = ParamStore()
    init_detector_params(store, 8, 16, rng)
    init_attention_params(store, 8, 8, 3, rng)
    v, k = 3, 2
    images = [rng.random((3, 16, 16)) for _ in range(v)]
    boxes = [[BBox(rng.uniform(0, 6), rng.uniform(0, 6),
                   rng.uniform(8, 16), rng.uniform(8, 16)) for _ in range(k)]
             for _ in range(v)]

    def f():
        parts_per_view = []
        for vi in range(v):
            fm = backbone_forward(store, Tensor(images[vi]))
            roi = roi_pool_batch(fm, boxes[vi], stride=8.0)
            feats = T.reshape(T.reduce_max(roi, axis=(2, 3)), (k, 8))
            parts_per_view.append(feats)
        out = shape_forward(store, parts_per_view, AttentionMode.FULL)
        return classification_loss(out.probabilities, one_hot(1, 3))

    return grad_check(f, store, max_coords=3, rng=rng)


def run_gradient_suite(seed: int = 0, verbose_print=None) -> dict[str, float]:
    """All checks; returns section -> max relative error."""
    rng = np.random.default_rng(seed)
    results = _elementary_checks(rng)
    results["detection_loss_path"] = _detection_path_check(rng)
    results["classification_path"] = _classification_path_check(rng)
    if verbose_print:
        for name, err in results.items():
            status = "ok" if err < TOLERANCE else "FAIL"
            verbose_print(f"  {name:24s} max rel err {err:.3e}  [{status}]")
    return results


def suite_passes(results: dict[str, float]) -> bool:
    return all(err < TOLERANCE for err in results.values())
