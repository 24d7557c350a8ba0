"""Class-agnostic part detection: backbone features, anchor grid, IoU
labeling, box regression coding, RoI pooling, the detection loss, and
top-K part-feature selection.

Two execution paths share one set of semantics:

* the differentiable path (``backbone_forward``, ``roi_pool``,
  ``roi_pool_batch``, ``head_forward``) used for training steps and
  gradient checks;
* a weights-snapshot fast path (``score_all_anchors``) that scores every
  anchor of a view at once, deduplicating anchors whose pooling windows
  coincide on the feature grid.  It is used wherever no gradient is
  needed (top-K extraction, evaluation) and matches the differentiable
  path to floating-point roundoff.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DetectionError, DimensionError, GeometryError
from .optim import ParamStore
from .render import BBox
from .tensor import Tensor

ROI_GRID = 7


# ---------------------------------------------------------------------------
# anchors


@dataclass(frozen=True)
class Anchor:
    cx: float
    cy: float
    width: float
    height: float

    def to_box(self) -> BBox:
        return BBox(self.cx - self.width / 2.0, self.cy - self.height / 2.0,
                    self.cx + self.width / 2.0, self.cy + self.height / 2.0)


def parse_ratio(ratio) -> float:
    """Aspect ratio as width:height, accepting '1:2' strings or floats."""
    if isinstance(ratio, str):
        try:
            w, h = ratio.split(":")
            return float(w) / float(h)
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"bad aspect ratio {ratio!r}") from None
    return float(ratio)


def generate_anchors(grid_size: int, scales, ratios, stride: float) -> list[Anchor]:
    """One anchor per (cell, scale, ratio); base side = scale x stride.

    Anchors are ordered cell-row-major, then by scale, then by ratio; this
    order defines the anchor index used for score tie-breaking.  Anchors
    may extend beyond the image; labeling and decoding handle clipping.
    """
    if not scales:
        raise ConfigError("anchor scales must be non-empty")
    ratio_vals = [parse_ratio(r) for r in ratios]
    anchors = []
    for row in range(grid_size):
        for col in range(grid_size):
            cx = (col + 0.5) * stride
            cy = (row + 0.5) * stride
            for scale in scales:
                base = float(scale) * stride
                for r in ratio_vals:
                    anchors.append(Anchor(cx, cy, base * np.sqrt(r), base / np.sqrt(r)))
    return anchors


def anchor_array(anchors: list[Anchor]) -> np.ndarray:
    """(N, 4) center-form array (cx, cy, w, h)."""
    return np.array([[a.cx, a.cy, a.width, a.height] for a in anchors])


def _center_to_corner(c: np.ndarray) -> np.ndarray:
    out = np.empty_like(c)
    out[:, 0] = c[:, 0] - c[:, 2] / 2
    out[:, 1] = c[:, 1] - c[:, 3] / 2
    out[:, 2] = c[:, 0] + c[:, 2] / 2
    out[:, 3] = c[:, 1] + c[:, 3] / 2
    return out


# ---------------------------------------------------------------------------
# box geometry


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    union = a.area() + b.area() - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (A, 4) and (B, 4) corner-form boxes."""
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(br - tl, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def assign_labels(anchors: list[Anchor], gt_boxes: list[BBox], s_d: float = 0.7):
    """Per-anchor {positive, negative} labels plus matched GT indices.

    An anchor is positive when its best IoU exceeds ``s_d``; additionally
    the single best anchor of every GT box is positive even below the
    threshold, so no GT goes unmatched.  Ties take the lowest index.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if not gt_boxes:
        return labels, matched
    a = _center_to_corner(anchor_array(anchors))
    g = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in gt_boxes])
    m = iou_matrix(a, g)
    best_gt = np.argmax(m, axis=1)
    best_iou = m[np.arange(n), best_gt]
    labels[best_iou > s_d] = 1
    matched[:] = best_gt
    # best-anchor-per-GT rule
    best_anchor = np.argmax(m, axis=0)
    labels[best_anchor] = 1
    matched[best_anchor] = np.arange(len(gt_boxes))
    matched[labels == 0] = -1
    return labels, matched


def encode_bbox(anchor: Anchor, gt: BBox) -> np.ndarray:
    """(dx, dy, log dw, log dh) of gt relative to the anchor."""
    gx, gy, gw, gh = gt.center_size()
    if gw <= 0 or gh <= 0 or anchor.width <= 0 or anchor.height <= 0:
        raise GeometryError(f"non-positive box size in encode: gt {gt}, anchor {anchor}")
    return np.array([(gx - anchor.cx) / anchor.width,
                     (gy - anchor.cy) / anchor.height,
                     np.log(gw / anchor.width),
                     np.log(gh / anchor.height)])


def decode_bbox(anchor: Anchor, t: np.ndarray, image_size: int | None = None) -> BBox:
    """Invert encode_bbox; clip to [0, image_size] when given."""
    cx = anchor.cx + float(t[0]) * anchor.width
    cy = anchor.cy + float(t[1]) * anchor.height
    w = anchor.width * float(np.exp(t[2]))
    h = anchor.height * float(np.exp(t[3]))
    x0, y0, x1, y1 = cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2
    if image_size is not None:
        x0, x1 = np.clip([x0, x1], 0.0, float(image_size))
        y0, y1 = np.clip([y0, y1], 0.0, float(image_size))
    return BBox(float(x0), float(y0), float(x1), float(y1))


def decode_array(centers: np.ndarray, t: np.ndarray, image_size: int) -> np.ndarray:
    """Vectorized decode of (N, 4) encodings against (N, 4) center-form anchors."""
    cx = centers[:, 0] + t[:, 0] * centers[:, 2]
    cy = centers[:, 1] + t[:, 1] * centers[:, 3]
    w = centers[:, 2] * np.exp(t[:, 2])
    h = centers[:, 3] * np.exp(t[:, 3])
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return np.clip(out, 0.0, float(image_size))


# ---------------------------------------------------------------------------
# RoI pooling


def _round_half_up(x):
    return np.floor(np.asarray(x) + 0.5).astype(np.int64)


def pooling_windows(lo: float, hi: float, cells: int, n: int = ROI_GRID):
    """Window [start, end) pairs along one axis of the feature grid.

    Boundaries are the rounded n+1 equispaced edges of [lo, hi]; every
    window is forced to cover at least one cell and stay inside the grid.
    """
    edges = _round_half_up(lo + (hi - lo) * np.arange(n + 1) / n)
    edges = np.clip(edges, 0, cells)
    starts = np.empty(n, dtype=np.int64)
    ends = np.empty(n, dtype=np.int64)
    for j in range(n):
        s, e = int(edges[j]), int(edges[j + 1])
        if e <= s:
            e = s + 1
        if e > cells:
            s, e = cells - 1, cells
        starts[j], ends[j] = s, e
    return starts, ends


def _box_to_feature_extent(box: BBox, stride: float, cells: int):
    fx0 = max(box.x_min / stride, 0.0)
    fy0 = max(box.y_min / stride, 0.0)
    fx1 = min(box.x_max / stride, float(cells))
    fy1 = min(box.y_max / stride, float(cells))
    if fx1 <= fx0 or fy1 <= fy0:
        raise GeometryError(
            f"box {box} collapses below one feature cell at stride {stride}")
    return fx0, fy0, fx1, fy1


def roi_pool(fm: Tensor, box: BBox, stride: float) -> Tensor:
    """Max-pool an image-space box into a (channels, 7, 7) grid.

    The box is mapped to feature coordinates by ``stride``; the gradient
    routes to the argmax cell of each window (lowest flat index on ties).
    """
    if fm.data.ndim != 3:
        raise DimensionError(f"roi_pool expects (C,S,S) features, got {fm.shape}")
    c, s, s2 = fm.shape
    fx0, fy0, fx1, fy1 = _box_to_feature_extent(box, stride, s)
    col_s, col_e = pooling_windows(fx0, fx1, s2)
    row_s, row_e = pooling_windows(fy0, fy1, s)

    data = fm.data
    out = np.zeros((c, ROI_GRID, ROI_GRID))
    arg = np.zeros((c, ROI_GRID, ROI_GRID), dtype=np.int64)
    for i in range(ROI_GRID):
        for j in range(ROI_GRID):
            window = data[:, row_s[i]:row_e[i], col_s[j]:col_e[j]]
            flat = window.reshape(c, -1)
            k = np.argmax(flat, axis=1)
            out[:, i, j] = flat[np.arange(c), k]
            wr, wc = np.unravel_index(k, window.shape[1:])
            arg[:, i, j] = (row_s[i] + wr) * s2 + (col_s[j] + wc)

    def backward_fn(g: np.ndarray) -> None:
        fm._ensure_grad()
        chan = np.arange(c)[:, None, None]
        glob = (chan * s * s2 + arg).ravel()
        np.add.at(fm.grad.reshape(-1), glob, g.ravel())

    return T._node(out, (fm,), backward_fn)


def roi_pool_windows(fm: Tensor, rows_s, rows_e, cols_s, cols_e) -> Tensor:
    """Differentiable pooling of precomputed (B, 7) window bounds."""
    c, s, s2 = fm.shape
    tables = RectMaxTables(fm.data)
    out, arg = tables.gather(rows_s, rows_e, cols_s, cols_e)

    def backward_fn(g: np.ndarray) -> None:
        fm._ensure_grad()
        chan = np.arange(c)[None, :, None, None]
        glob = (chan * s * s2 + arg).ravel()
        np.add.at(fm.grad.reshape(-1), glob, g.ravel())

    return T._node(out, (fm,), backward_fn)


def roi_pool_batch(fm: Tensor, boxes: list[BBox], stride: float) -> Tensor:
    """roi_pool over many boxes at once -> (B, channels, 7, 7)."""
    if not boxes:
        raise DetectionError("roi_pool_batch needs at least one box")
    c, s, s2 = fm.shape
    rows_s = np.empty((len(boxes), ROI_GRID), dtype=np.int64)
    rows_e = np.empty_like(rows_s)
    cols_s = np.empty_like(rows_s)
    cols_e = np.empty_like(rows_s)
    for bi, box in enumerate(boxes):
        fx0, fy0, fx1, fy1 = _box_to_feature_extent(box, stride, s)
        cols_s[bi], cols_e[bi] = pooling_windows(fx0, fx1, s2)
        rows_s[bi], rows_e[bi] = pooling_windows(fy0, fy1, s)
    return roi_pool_windows(fm, rows_s, rows_e, cols_s, cols_e)


class RectMaxTables:
    """All-rectangle max/argmax tables over an (C, S, S) feature plane.

    Built once per view, they turn RoI pooling of any number of boxes into
    pure index gathers.  Argmax ties resolve to the lowest flat index
    (first row, then first column), matching the single-box path.
    """

    def __init__(self, data: np.ndarray):
        c, s, s2 = data.shape
        self.c, self.s, self.s2 = c, s, s2
        ncol = s2 * (s2 + 1)
        # per-row column-interval maxima, keyed by c0*(s2+1)+c1; layout (ncol, S, C)
        colv = np.zeros((ncol, s, c))
        colc = np.zeros((ncol, s, c), dtype=np.int64)
        plane = data.transpose(2, 1, 0)  # (col, row, C)
        for c0 in range(s2):
            cur = plane[c0].copy()
            argc = np.full((s, c), c0, dtype=np.int64)
            colv[c0 * (s2 + 1) + c0 + 1] = cur
            colc[c0 * (s2 + 1) + c0 + 1] = argc
            for c1 in range(c0 + 2, s2 + 1):
                cand = plane[c1 - 1]
                better = cand > cur
                cur = np.where(better, cand, cur)
                argc = np.where(better, c1 - 1, argc)
                colv[c0 * (s2 + 1) + c1] = cur
                colc[c0 * (s2 + 1) + c1] = argc

        # row-interval DP vectorized over every column interval at once
        self.val = np.zeros((s, s + 1, ncol, c))
        self.arg = np.zeros((s, s + 1, ncol, c), dtype=np.int64)
        for r0 in range(s):
            cur = colv[:, r0, :].copy()                # (ncol, C)
            argr = np.full((ncol, c), r0, dtype=np.int64)
            argc = colc[:, r0, :].copy()
            self.val[r0, r0 + 1] = cur
            self.arg[r0, r0 + 1] = argr * s2 + argc
            for r1 in range(r0 + 2, s + 1):
                cand = colv[:, r1 - 1, :]
                better = cand > cur
                cur = np.where(better, cand, cur)
                argc = np.where(better, colc[:, r1 - 1, :], argc)
                argr = np.where(better, r1 - 1, argr)
                self.val[r0, r1] = cur
                self.arg[r0, r1] = argr * s2 + argc
        self._val2 = self.val.reshape(-1, c)
        self._arg2 = self.arg.reshape(-1, c)

    def _flat_index(self, rows_s, rows_e, cols_s, cols_e):
        s, s2 = self.s, self.s2
        ri = rows_s[:, :, None]
        re = rows_e[:, :, None]
        ci = cols_s[:, None, :]
        ce = cols_e[:, None, :]
        ncol = s2 * (s2 + 1)
        return (ri * (s + 1) + re) * ncol + ci * (s2 + 1) + ce   # (B, 7, 7)

    def gather(self, rows_s, rows_e, cols_s, cols_e, want_arg: bool = True):
        """(B,7) window bounds -> pooled (B, C, 7, 7) values and flat argmax."""
        flat_idx = self._flat_index(rows_s, rows_e, cols_s, cols_e)
        vals = self._val2[flat_idx]                  # (B, 7, 7, C)
        out = np.ascontiguousarray(vals.transpose(0, 3, 1, 2))
        if not want_arg:
            return out, None
        args = self._arg2[flat_idx]
        arg = np.ascontiguousarray(args.transpose(0, 3, 1, 2))
        return out, arg


# ---------------------------------------------------------------------------
# detector parameters and forward passes


def backbone_channels(feature_channels: int, blocks: int = 3) -> tuple[int, ...]:
    """Channel ramp ending at feature_channels: D/2^(n-1), ..., D/2, D."""
    return tuple(max(1, feature_channels // (1 << (blocks - i))) for i in range(1, blocks + 1))


def feature_grid_size(image_size: int, blocks: int = 3, valid_conv: bool = False) -> int:
    """Spatial side of the feature map for a square input.

    Each block halves the resolution; the optional trailing unpadded 3x3
    conv shaves 2 more (the route to a 12x12 map from 224 input with 4
    blocks).  The desk default (3 blocks, no valid conv) has stride 8.
    """
    pool = 1 << blocks
    if image_size % pool != 0:
        raise ConfigError(f"image side {image_size} not divisible by backbone stride {pool}")
    side = image_size // pool
    if valid_conv:
        side -= 2
    if side < 1:
        raise ConfigError(f"image side {image_size} too small for {blocks} backbone blocks")
    return side


def feature_stride(image_size: int, blocks: int = 3, valid_conv: bool = False) -> float:
    return image_size / feature_grid_size(image_size, blocks, valid_conv)


def init_detector_params(store: ParamStore, feature_channels: int, head_dim: int,
                         rng: np.random.Generator, blocks: int = 3,
                         valid_conv: bool = False) -> None:
    """Register backbone and head weights under the ``det.`` prefix.

    Weights draw from U(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases start at
    zero.  The draw order is fixed and part of the determinism contract.
    """
    in_ch = 3
    for i, out_ch in enumerate(backbone_channels(feature_channels, blocks), start=1):
        bound = 1.0 / np.sqrt(in_ch * 9)
        store.add(f"det.conv{i}.w",
                  Tensor(rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3)), requires_grad=True))
        store.add(f"det.conv{i}.b", Tensor(np.zeros(out_ch), requires_grad=True))
        in_ch = out_ch
    if valid_conv:
        bound = 1.0 / np.sqrt(in_ch * 9)
        store.add("det.conv_valid.w",
                  Tensor(rng.uniform(-bound, bound,
                                     size=(feature_channels, in_ch, 3, 3)), requires_grad=True))
        store.add("det.conv_valid.b", Tensor(np.zeros(feature_channels), requires_grad=True))
    flat = feature_channels * ROI_GRID * ROI_GRID
    # linear weights live in (fan_in, fan_out) layout: y = x @ w + b
    for name, fan_in, fan_out in [("fc1", flat, head_dim), ("fc2", head_dim, head_dim),
                                  ("score", head_dim, 2), ("reg", head_dim, 4)]:
        bound = 1.0 / np.sqrt(fan_in)
        store.add(f"det.{name}.w",
                  Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        store.add(f"det.{name}.b", Tensor(np.zeros((1, fan_out)), requires_grad=True))


def _conv_block(x: Tensor, weight: Tensor, bias: Tensor, pad: int, pool: bool) -> Tensor:
    x = T.conv2d(x, weight, stride=1, pad=pad)
    bias3 = T.reshape(bias, (bias.shape[0], 1, 1))
    x = T.relu(T.add(x, T.broadcast_to(bias3, x.shape)))
    return T.max_pool2d(x, 2, 2) if pool else x


def backbone_forward(store: ParamStore, image: Tensor, blocks: int = 3,
                     valid_conv: bool = False) -> Tensor:
    """(3, H, W) image -> (feature_channels, S, S) feature map."""
    c, h, w = image.shape
    if h != w:
        raise ConfigError(f"backbone needs square input, got {h}x{w}")
    feature_grid_size(h, blocks, valid_conv)  # validates divisibility
    x = image
    for i in range(1, blocks + 1):
        x = _conv_block(x, store[f"det.conv{i}.w"], store[f"det.conv{i}.b"], pad=1, pool=True)
    if valid_conv:
        x = _conv_block(x, store["det.conv_valid.w"], store["det.conv_valid.b"], pad=0, pool=False)
    return x


def head_forward(store: ParamStore, roi: Tensor) -> tuple[Tensor, Tensor]:
    """(B, C, 7, 7) pooled features -> (B, 2) score logits and (B, 4) encodings."""
    b = roi.shape[0]
    x = T.reshape(roi, (b, roi.shape[1] * roi.shape[2] * roi.shape[3]))
    for name in ("fc1", "fc2"):
        w = store[f"det.{name}.w"]
        bias = store[f"det.{name}.b"]
        x = T.relu(T.add(T.matmul(x, w), T.broadcast_to(bias, (b, w.shape[1]))))
    logits = T.add(T.matmul(x, store["det.score.w"]),
                   T.broadcast_to(store["det.score.b"], (b, 2)))
    reg = T.add(T.matmul(x, store["det.reg.w"]),
                T.broadcast_to(store["det.reg.b"], (b, 4)))
    return logits, reg


def score_sampled_anchors(store: ParamStore, fm: Tensor, layout: "AnchorLayout",
                          anchor_indices: np.ndarray) -> tuple[Tensor, Tensor]:
    """Differentiable scores/encodings for a subset of anchors of one view.

    Anchors whose clipped boxes round to the same pooling windows share one
    head evaluation; results are gathered back to the requested order.
    """
    uniq, back = np.unique(layout.inverse[anchor_indices], return_inverse=True)
    rep = layout.unique_idx[uniq]
    roi = roi_pool_windows(fm, layout.rows_s[rep], layout.rows_e[rep],
                           layout.cols_s[rep], layout.cols_e[rep])
    logits_u, reg_u = head_forward(store, roi)
    logits = T.gather_rows(logits_u, back)
    reg = T.gather_rows(reg_u, back)
    return gsp_scores(logits), reg


def gsp_scores(logits: Tensor) -> Tensor:
    """Column 1 of the per-anchor 2-way softmax: P(part | anchor), shape (B,)."""
    probs = T.softmax(logits, axis=1)
    picked = T.matmul(probs, T.tensor([[0.0], [1.0]]))
    return T.reshape(picked, (logits.shape[0],))


# ---------------------------------------------------------------------------
# anchor layout (config-static pooling windows, deduplicated)


class AnchorLayout:
    """Anchors of one view plus their precomputed pooling windows.

    Many anchors clip to identical feature-grid windows (large scales all
    collapse to the whole map), so the fast scoring path evaluates each
    unique window once and scatters results back to anchor order.
    """

    def __init__(self, image_size: int, grid_size: int, scales, ratios, stride: float):
        self.image_size = image_size
        self.grid_size = grid_size
        self.stride = stride
        self.anchors = generate_anchors(grid_size, scales, ratios, stride)
        self.centers = anchor_array(self.anchors)
        self.corners = _center_to_corner(self.centers)
        n = len(self.anchors)
        sig = np.empty((n, 4 * ROI_GRID), dtype=np.int64)
        self.rows_s = np.empty((n, ROI_GRID), dtype=np.int64)
        self.rows_e = np.empty_like(self.rows_s)
        self.cols_s = np.empty_like(self.rows_s)
        self.cols_e = np.empty_like(self.rows_s)
        for i, a in enumerate(self.anchors):
            box = a.to_box()
            clipped = BBox(max(box.x_min, 0.0), max(box.y_min, 0.0),
                           min(box.x_max, float(image_size)), min(box.y_max, float(image_size)))
            fx0, fy0, fx1, fy1 = _box_to_feature_extent(clipped, stride, grid_size)
            cs, ce = pooling_windows(fx0, fx1, grid_size)
            rs, re = pooling_windows(fy0, fy1, grid_size)
            self.rows_s[i], self.rows_e[i] = rs, re
            self.cols_s[i], self.cols_e[i] = cs, ce
            sig[i] = np.concatenate([rs, re, cs, ce])
        _, unique_idx, inverse = np.unique(sig, axis=0, return_index=True, return_inverse=True)
        self.unique_idx = unique_idx      # (U,) representative anchor per unique window
        self.inverse = inverse            # (N,) anchor -> unique id

    def __len__(self) -> int:
        return len(self.anchors)


class DetectorWeights:
    """Plain-array snapshot of the detector parameters for no-grad scoring."""

    def __init__(self, store: ParamStore, blocks: int = 3, valid_conv: bool = False):
        self.blocks = blocks
        self.valid_conv = valid_conv
        self.conv = [(store[f"det.conv{i}.w"].data, store[f"det.conv{i}.b"].data)
                     for i in range(1, blocks + 1)]
        if valid_conv:
            self.conv_valid = (store["det.conv_valid.w"].data, store["det.conv_valid.b"].data)
        self.fc = [(store[f"det.{n}.w"].data, store[f"det.{n}.b"].data)
                   for n in ("fc1", "fc2", "score", "reg")]


def backbone_forward_raw(weights: DetectorWeights, image: np.ndarray) -> np.ndarray:
    """No-grad twin of backbone_forward over a raw (3, H, W) array."""
    x = Tensor(image)
    for w, b in weights.conv:
        x = _conv_block(x, Tensor(w), Tensor(b), pad=1, pool=True)
    if weights.valid_conv:
        w, b = weights.conv_valid
        x = _conv_block(x, Tensor(w), Tensor(b), pad=0, pool=False)
    return x.data


def score_all_anchors(weights: DetectorWeights, fm_data: np.ndarray, layout: AnchorLayout):
    """Score and regress every anchor of one view without gradients.

    Returns (scores (N,), encodings (N, 4), pooled_unique (U, C, 7, 7)).
    """
    tables = RectMaxTables(fm_data)
    u = layout.unique_idx
    pooled, _ = tables.gather(layout.rows_s[u], layout.rows_e[u],
                              layout.cols_s[u], layout.cols_e[u], want_arg=False)
    x = pooled.reshape(pooled.shape[0], -1)
    (w1, b1), (w2, b2), (ws, bs), (wr, br) = weights.fc
    x = np.maximum(x @ w1 + b1, 0.0)
    x = np.maximum(x @ w2 + b2, 0.0)
    logits = x @ ws + bs
    reg = x @ wr + br
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    scores = probs[layout.inverse, 1]
    encodings = reg[layout.inverse]
    return scores, encodings, pooled


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k best scores, ties broken by lower anchor index."""
    if scores.size == 0:
        raise DetectionError("no proposals to select from")
    order = np.lexsort((np.arange(scores.size), -scores))
    if scores.size >= k:
        return order[:k]
    # pad by repeating the best proposal
    pad = np.full(k - scores.size, order[0], dtype=np.int64)
    return np.concatenate([order, pad])


def gsp_features_from_pooled(pooled_unique: np.ndarray, inverse: np.ndarray,
                             selected: np.ndarray) -> np.ndarray:
    """(K, C) per-channel spatial max of the selected anchors' RoI features."""
    picked = pooled_unique[inverse[selected]]
    return picked.max(axis=(2, 3))


# ---------------------------------------------------------------------------
# proposals (object surface used by tests, export, and visualization)


@dataclass
class Proposal:
    view_index: int
    anchor_index: int
    anchor: Anchor
    score: float
    encoding: np.ndarray
    box: BBox                 # decoded, clipped to the image
    roi_feature: Tensor       # (C, 7, 7)


def propose_view(store: ParamStore, fm: Tensor, layout: AnchorLayout,
                 view_index: int = 0) -> list[Proposal]:
    """Differentiable per-anchor proposals for one view (small inputs only)."""
    boxes = []
    for a in layout.anchors:
        b = a.to_box()
        boxes.append(BBox(max(b.x_min, 0.0), max(b.y_min, 0.0),
                          min(b.x_max, float(layout.image_size)),
                          min(b.y_max, float(layout.image_size))))
    roi = roi_pool_batch(fm, boxes, layout.stride)
    logits, reg = head_forward(store, roi)
    scores = gsp_scores(logits).data
    out = []
    for i, a in enumerate(layout.anchors):
        t = reg.data[i]
        out.append(Proposal(
            view_index=view_index,
            anchor_index=i,
            anchor=a,
            score=float(scores[i]),
            encoding=t.copy(),
            box=decode_bbox(a, t, layout.image_size),
            roi_feature=T.slice_rows(T.reshape(roi, (len(boxes), -1)), i, i + 1),
        ))
    # reshape back to (C,7,7) lazily when consumed; keep flat row here
    c = fm.shape[0]
    for p in out:
        p.roi_feature = T.reshape(p.roi_feature, (c, ROI_GRID, ROI_GRID))
    return out


def select_top_k(proposals: list[Proposal], k: int) -> list[Tensor]:
    """Top-k proposals by score (ties: lower anchor index), each reduced to
    a (1, C) part feature by per-channel spatial max; short lists pad by
    repeating the best proposal."""
    if not proposals:
        raise DetectionError("select_top_k on zero proposals")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    ranked = sorted(proposals, key=lambda p: (-p.score, p.anchor_index))
    chosen = ranked[:k]
    while len(chosen) < k:
        chosen.append(ranked[0])
    feats = []
    for p in chosen:
        c = p.roi_feature.shape[0]
        feats.append(T.reshape(T.reduce_max(p.roi_feature, axis=(1, 2)), (1, c)))
    return feats


def nms_filter(scores: np.ndarray, boxes: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns surviving indices (off by default)."""
    order = np.lexsort((np.arange(scores.size), -scores))
    keep = []
    suppressed = np.zeros(scores.size, dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        remaining = order[~suppressed[order]]
        ious = iou_matrix(boxes[idx:idx + 1], boxes[remaining])[0]
        suppressed[remaining[ious > iou_threshold]] = True
        suppressed[idx] = False  # keep the kept one unmarked for bookkeeping
    return np.array(keep, dtype=np.int64)


# ---------------------------------------------------------------------------
# detection loss


def detection_loss(p_d: Tensor, p_star: np.ndarray, t_d: Tensor, t_star: np.ndarray,
                   reg_weight: float = 1.0, smooth: bool = False) -> Tensor:
    """Scoring + localization loss over a sampled anchor minibatch.

    ``p_d`` holds part probabilities for B anchors ordered positives-first;
    ``t_d``/``t_star`` hold encodings for the positive prefix only.  The
    score term is the mean binary cross-entropy; the localization term is
    the mean (over positives) summed L1 distance of the 4 encoding
    components, or its smooth variant behind ``smooth``.
    """
    b = p_d.shape[0]
    if p_star.shape[0] != b:
        raise DimensionError(f"{b} scores vs {p_star.shape[0]} labels")
    y = T.tensor(p_star.astype(np.float64))
    one = T.tensor(np.ones(b))
    pos_term = T.mul(y, T.log(T.clamp_min(p_d, 1e-12)))
    neg_term = T.mul(T.sub(one, y), T.log(T.clamp_min(T.sub(one, p_d), 1e-12)))
    l_sem = T.scale(T.reduce_sum(T.add(pos_term, neg_term)), -1.0 / b)

    n_pos = int(t_star.shape[0]) if t_star is not None else 0
    if n_pos == 0:
        return l_sem
    diff = T.sub(t_d, T.tensor(t_star))
    if smooth:
        inner = np.abs(t_d.data - t_star) < 1.0
        m_in = T.tensor(inner.astype(np.float64))
        m_out = T.tensor(1.0 - inner.astype(np.float64))
        half = T.tensor(np.full(diff.shape, 0.5))
        val = T.add(T.mul(m_in, T.scale(T.mul(diff, diff), 0.5)),
                    T.mul(m_out, T.sub(T.absolute(diff), half)))
    else:
        val = T.absolute(diff)
    l_reg = T.scale(T.reduce_sum(val), 1.0 / n_pos)
    return T.add(l_sem, T.scale(l_reg, reg_weight))


def detection_recall(pred_boxes_per_view: list[np.ndarray],
                     gt_boxes_per_view: list[list[BBox]],
                     iou_threshold: float = 0.5) -> float:
    """Fraction of GT boxes overlapped (IoU >= threshold) by some prediction."""
    total, hit = 0, 0
    for preds, gts in zip(pred_boxes_per_view, gt_boxes_per_view):
        if not gts:
            continue
        g = np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in gts])
        total += len(gts)
        if preds.size == 0:
            continue
        m = iou_matrix(g, preds)
        hit += int(np.sum(m.max(axis=1) >= iou_threshold))
    return hit / total if total else 1.0
