"""Hierarchical part-view attention aggregation and the shape classifier.

Per view, a learned bilinear similarity weights the K detected part
features into one view feature; across views a second bilinear weights
the V view features into a global feature; a GRU pass over the
global-enhanced view sequence, projected and max-pooled, yields the
representation the softmax classifier consumes.

Ablation modes replace attention weights with constants (1/K at the part
level, 1/V at the view level) or skip the recurrent stage; the bilinear
attention matrices themselves are always computed from the parameters so
exported heatmaps reflect the learned similarities even in ablations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .imageio import write_pgm
from .optim import ParamStore
from .tensor import Tensor


class AttentionMode(Enum):
    FULL = "full"
    OPA = "opa"   # only part-level attention; view level fixed at 1/V
    OVA = "ova"   # only view-level attention; part level fixed at 1/K
    NA = "na"     # both levels fixed
    NR = "nr"     # no recurrent stage; classifier consumes the global feature

    @classmethod
    def parse(cls, name: str) -> "AttentionMode":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"unknown attention mode {name!r}; "
                              f"expected one of {[m.value for m in cls]}") from None

    @property
    def part_attention_fixed(self) -> bool:
        return self in (AttentionMode.OVA, AttentionMode.NA)

    @property
    def view_attention_fixed(self) -> bool:
        return self in (AttentionMode.OPA, AttentionMode.NA)


GRU_GATES = ("update", "reset", "candidate")


def init_attention_params(store: ParamStore, feat_dim: int, hidden_dim: int,
                          num_classes: int, rng: np.random.Generator) -> None:
    """Register the attention branch under the ``att.`` prefix.

    Bilinear matrices start at identity plus uniform noise in [-0.01, 0.01]
    so initial attention approximates feature self-similarity; linear maps
    draw from U(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases and the initial
    GRU state are zero.  Draw order is fixed for determinism.
    """
    d, h, c = feat_dim, hidden_dim, num_classes
    eye_noise = lambda: np.eye(d) + rng.uniform(-0.01, 0.01, size=(d, d))
    store.add("att.part_bilinear", Tensor(eye_noise(), requires_grad=True))
    store.add("att.view_bilinear", Tensor(eye_noise(), requires_grad=True))
    for gate in GRU_GATES:
        bound_in = 1.0 / np.sqrt(d)
        bound_h = 1.0 / np.sqrt(h)
        store.add(f"att.gru.{gate}.w",
                  Tensor(rng.uniform(-bound_in, bound_in, size=(d, h)), requires_grad=True))
        store.add(f"att.gru.{gate}.u",
                  Tensor(rng.uniform(-bound_h, bound_h, size=(h, h)), requires_grad=True))
        store.add(f"att.gru.{gate}.b", Tensor(np.zeros((1, h)), requires_grad=True))
    bound = 1.0 / np.sqrt(h)
    store.add("att.out_proj", Tensor(rng.uniform(-bound, bound, size=(h, d)), requires_grad=True))
    bound = 1.0 / np.sqrt(d)
    store.add("att.cls.w", Tensor(rng.uniform(-bound, bound, size=(d, c)), requires_grad=True))
    store.add("att.cls.b", Tensor(np.zeros((1, c)), requires_grad=True))


def bilinear_attention(features: Tensor, matrix: Tensor) -> Tensor:
    """Row-wise softmax of features @ matrix @ features^T."""
    if features.shape[1] != matrix.shape[0]:
        raise DimensionError(
            f"features {features.shape} do not match bilinear matrix {matrix.shape}")
    scores = T.matmul(T.matmul(features, matrix), T.transpose(features))
    return T.softmax(scores, axis=1)


def part_attention(parts: Tensor, part_bilinear: Tensor,
                   mode: AttentionMode = AttentionMode.FULL) -> tuple[Tensor, Tensor]:
    """Aggregate K part features (K, D) of one view into a view feature (1, D).

    Returns (view_feature, attention_matrix).  The attention matrix is
    always the learned bilinear softmax; when the mode fixes part
    attention, aggregation uses the constant 1/K weights instead.
    """
    k = parts.shape[0]
    if k < 1:
        raise DimensionError("part_attention needs at least one part")
    q = bilinear_attention(parts, part_bilinear)
    weights = T.tensor(np.full((k, k), 1.0 / k)) if mode.part_attention_fixed else q
    context = T.matmul(weights, parts)
    view_feature = T.reduce_sum(context, axis=0, keepdims=True)
    return view_feature, q


def view_attention(views: Tensor, view_bilinear: Tensor,
                   mode: AttentionMode = AttentionMode.FULL) -> tuple[Tensor, Tensor]:
    """Aggregate V view features (V, D) into the global feature (1, D)."""
    v = views.shape[0]
    if v < 1:
        raise DimensionError("view_attention needs at least one view")
    theta = bilinear_attention(views, view_bilinear)
    weights = T.tensor(np.full((v, v), 1.0 / v)) if mode.view_attention_fixed else theta
    context = T.matmul(weights, views)
    global_feature = T.reduce_sum(context, axis=0, keepdims=True)
    return global_feature, theta


def gru_step(h_prev: Tensor, x: Tensor, store: ParamStore) -> Tensor:
    """One gated-recurrent-unit step: h = (1-z) * h_prev + z * candidate."""
    def gate(name, activation, h_in):
        pre = T.add(T.add(T.matmul(x, store[f"att.gru.{name}.w"]),
                          T.matmul(h_in, store[f"att.gru.{name}.u"])),
                    store[f"att.gru.{name}.b"])
        return activation(pre)

    z = gate("update", T.sigmoid, h_prev)
    r = gate("reset", T.sigmoid, h_prev)
    candidate = T.tanh(T.add(T.add(T.matmul(x, store["att.gru.candidate.w"]),
                                   T.matmul(T.mul(r, h_prev), store["att.gru.candidate.u"])),
                             store["att.gru.candidate.b"]))
    one = T.tensor(np.ones(z.shape))
    return T.add(T.mul(T.sub(one, z), h_prev), T.mul(z, candidate))


def view_feature_enhance(view_feats: Tensor, global_feature: Tensor, store: ParamStore,
                         mode: AttentionMode = AttentionMode.FULL):
    """Global-feature injection, GRU unroll, projection, elementwise max.

    Returns (shape_feature (1, D), step_outputs (V, D) or None).  In the
    no-RNN mode the recurrent stage is skipped entirely and the shape
    feature is the global feature itself.
    """
    if mode is AttentionMode.NR:
        return global_feature, None
    v, d = view_feats.shape
    enhanced = T.add(view_feats, T.broadcast_to(global_feature, (v, d)))
    hidden = T.zeros((1, store["att.out_proj"].shape[0]))
    outputs = []
    for t in range(v):
        x_t = T.slice_rows(enhanced, t, t + 1)
        hidden = gru_step(hidden, x_t, store)
        outputs.append(T.matmul(hidden, store["att.out_proj"]))
    stacked = T.concat(outputs, axis=0)
    shape_feature = T.reduce_max(stacked, axis=0, keepdims=True)
    return shape_feature, stacked


def classify(shape_feature: Tensor, store: ParamStore) -> Tensor:
    """Softmax class probabilities (1, C) from the shape feature (1, D)."""
    logits = T.add(T.matmul(shape_feature, store["att.cls.w"]), store["att.cls.b"])
    return T.softmax(logits, axis=1)


def classification_loss(probabilities: Tensor, target: Tensor | np.ndarray) -> Tensor:
    if not isinstance(target, Tensor):
        target = T.tensor(np.asarray(target, dtype=np.float64).reshape(probabilities.shape))
    return T.cross_entropy(probabilities, target)


def one_hot(label: int, num_classes: int) -> np.ndarray:
    out = np.zeros((1, num_classes))
    out[0, int(label)] = 1.0
    return out


def total_loss(det_loss: Tensor, cls_loss: Tensor, psi: float = 1.0) -> Tensor:
    """Combined objective: detection loss + psi * classification loss."""
    return T.add(det_loss, T.scale(cls_loss, psi))


@dataclass
class ShapeForward:
    probabilities: Tensor          # (1, C)
    part_attention_maps: list[np.ndarray]   # V matrices (K, K)
    view_attention_map: np.ndarray           # (V, V)
    global_feature: Tensor         # (1, D), pre-RNN
    shape_feature: Tensor          # (1, D), post max-pool (== global in NR)


def shape_forward(store: ParamStore, parts_per_view: list[Tensor],
                  mode: AttentionMode = AttentionMode.FULL) -> ShapeForward:
    """Full aggregation pipeline for one shape's V views of (K, D) parts."""
    view_feats = []
    q_maps = []
    for parts in parts_per_view:
        f_i, q = part_attention(parts, store["att.part_bilinear"], mode)
        view_feats.append(f_i)
        q_maps.append(q.data.copy())
    views = T.concat(view_feats, axis=0)
    global_feature, theta = view_attention(views, store["att.view_bilinear"], mode)
    shape_feature, _ = view_feature_enhance(views, global_feature, store, mode)
    probs = classify(shape_feature, store)
    return ShapeForward(probs, q_maps, theta.data.copy(), global_feature, shape_feature)


def cyclic_shift_sensitivity(store: ParamStore, parts_per_view: list[Tensor],
                             mode: AttentionMode = AttentionMode.FULL) -> float:
    """Max probability deviation under cyclic shifts of the view order.

    The max-pool readout is permutation-invariant over a fixed output set,
    but the GRU unroll is order-sensitive, so this is a diagnostic to
    report, not an invariant to assert.
    """
    base = shape_forward(store, parts_per_view, mode).probabilities.data
    worst = 0.0
    v = len(parts_per_view)
    for shift in range(1, v):
        rolled = parts_per_view[shift:] + parts_per_view[:shift]
        probs = shape_forward(store, rolled, mode).probabilities.data
        worst = max(worst, float(np.max(np.abs(probs - base))))
    return worst


# ---------------------------------------------------------------------------
# heatmap export


def normalize_heatmap(matrix: np.ndarray) -> np.ndarray:
    lo = float(matrix.min())
    hi = float(matrix.max())
    if hi <= lo:
        return np.zeros_like(matrix)
    return (matrix - lo) / (hi - lo)


def export_attention_maps(q: np.ndarray, theta: np.ndarray, out_dir: str,
                          stem: str = "") -> tuple[str, str]:
    """Write min-max-normalized PGM heatmaps of both attention matrices."""
    os.makedirs(out_dir, exist_ok=True)
    q_path = os.path.join(out_dir, f"{stem}part_attention.pgm")
    theta_path = os.path.join(out_dir, f"{stem}view_attention.pgm")
    write_pgm(q_path, normalize_heatmap(np.asarray(q, dtype=np.float64)))
    write_pgm(theta_path, normalize_heatmap(np.asarray(theta, dtype=np.float64)))
    return q_path, theta_path
