"""Alternating two-phase training, evaluation metrics, and ablation runs.

Detector phases optimize backbone and head parameters against the
detection loss; classifier phases freeze the detector, extract top-K part
features once per shape, and optimize only the attention branch.  Feature
extraction after each detector phase is cached for the whole classifier
phase, which is exact because the detector is frozen there.

Determinism contract: given (seed, config, dataset), every logged loss
and every final parameter value is reproducible.  At each round boundary
the live parameters and optimizer moments pass through float32, matching
checkpoint precision, so checkpoint/resume continues bit-identically.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    AttentionMode,
    classification_loss,
    init_attention_params,
    one_hot,
    shape_forward,
)
from .checkpoint import load_checkpoint, rng_from_json, rng_state_to_json, save_checkpoint
from .config import Config, serialize_config
from .dataset import Dataset, DatasetEntry, shape_content_hash
from .detector import (
    AnchorLayout,
    DetectorWeights,
    assign_labels,
    backbone_forward,
    backbone_forward_raw,
    decode_array,
    detection_loss,
    detection_recall,
    encode_bbox,
    feature_grid_size,
    feature_stride,
    gsp_features_from_pooled,
    init_detector_params,
    nms_filter,
    score_all_anchors,
    score_sampled_anchors,
    top_k_indices,
)
from .errors import DataError, DetectionError
from .meshes import load_off, normalize_mesh
from .optim import ParamStore, adam_step
from .render import CameraRig, ground_truth_boxes, read_gt_csv, render_views, write_gt_csv
from .tensor import Tensor


@dataclass
class EvalReport:
    instance_accuracy: float
    class_accuracy: float
    confusion: np.ndarray  # (C, C) counts, rows = true class
    predictions: list[tuple[str, int, int, np.ndarray]]  # shape_id, true, pred, probs


@dataclass
class TrainState:
    params: ParamStore
    rng: np.random.Generator
    completed_rounds: int = 0
    phase: str = "detector"
    loss_history: list = field(default_factory=list)
    last_det_loss: float = float("nan")
    last_cls_loss: float = float("nan")


class RunContext:
    """Config, dataset, camera rig, anchor layout, and per-run caches."""

    def __init__(self, cfg: Config, dataset: Dataset):
        self.cfg = cfg
        self.dataset = dataset
        self.rig = CameraRig(views=cfg.views, elevation_deg=cfg.elevation_deg,
                             distance=cfg.camera_distance, fov_deg=cfg.fov_deg,
                             image_size=cfg.image_size)
        grid = feature_grid_size(cfg.image_size, cfg.backbone_blocks, cfg.backbone_valid_conv)
        stride = feature_stride(cfg.image_size, cfg.backbone_blocks, cfg.backbone_valid_conv)
        self.layout = AnchorLayout(cfg.image_size, grid, cfg.anchor_scales,
                                   cfg.anchor_ratios, stride)
        self.mode = AttentionMode.parse(cfg.attention_mode)
        # optional validation carve-out from the tail of the training split
        n_val = int(len(dataset.train) * cfg.validation_fraction)
        self.train_entries = dataset.train[:len(dataset.train) - n_val]
        self.val_entries = dataset.train[len(dataset.train) - n_val:] if n_val else []
        self._views: dict[str, np.ndarray] = {}
        self._gt: dict[str, dict[int, list]] = {}
        self._assign: dict[str, list] = {}

    # -- view cache ---------------------------------------------------------

    def view_cache_path(self, entry: DatasetEntry) -> str:
        key = f"{shape_content_hash(entry)}_{'_'.join(str(v) for v in self.rig.key())}"
        return os.path.join(self.cfg.out_dir, "cache", "views", key + ".npy")

    def load_views(self, entry: DatasetEntry) -> np.ndarray:
        """(V, 3, H, W) channel-first float images; rendered once, cached."""
        cached = self._views.get(entry.shape_id)
        if cached is not None:
            return cached
        path = self.view_cache_path(entry)
        if os.path.exists(path):
            stack = np.load(path)
        else:
            mesh = normalize_mesh(load_off(entry.path))
            views = render_views(mesh, self.rig)
            stack = np.stack([img.transpose(2, 0, 1) for img in views.images])
            os.makedirs(os.path.dirname(path), exist_ok=True)
            np.save(path, stack)
        self._views[entry.shape_id] = stack
        return stack

    # -- ground truth ---------------------------------------------------------

    def gt_path(self, entry: DatasetEntry) -> str:
        return os.path.join(self.cfg.out_dir, "gt", entry.shape_id + ".csv")

    def build_ground_truth(self, entries: list[DatasetEntry]) -> None:
        for entry in entries:
            path = self.gt_path(entry)
            if os.path.exists(path):
                continue
            mesh = normalize_mesh(load_off(entry.path))
            per_view = ground_truth_boxes(mesh, self.rig, self.dataset.part_categories)
            os.makedirs(os.path.dirname(path), exist_ok=True)
            write_gt_csv(path, per_view)

    def load_gt(self, entry: DatasetEntry) -> dict[int, list]:
        cached = self._gt.get(entry.shape_id)
        if cached is None:
            cached = read_gt_csv(self.gt_path(entry))
            self._gt[entry.shape_id] = cached
        return cached

    def anchor_assignment(self, entry: DatasetEntry) -> list:
        """Per-view (labels, matched, gt_boxes); anchors and GT are static."""
        cached = self._assign.get(entry.shape_id)
        if cached is None:
            gt = self.load_gt(entry)
            cached = []
            for vi in range(self.cfg.views):
                boxes = gt.get(vi, [])
                labels, matched = assign_labels(self.layout.anchors, boxes, self.cfg.s_d)
                cached.append((labels, matched, boxes))
            self._assign[entry.shape_id] = cached
        return cached


def build_params(cfg: Config, num_classes: int) -> ParamStore:
    """Initialize both branches from the config seed; draw order is fixed."""
    store = ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 0)))
    init_detector_params(store, cfg.feature_channels, cfg.head_dim, rng,
                         blocks=cfg.backbone_blocks, valid_conv=cfg.backbone_valid_conv)
    init_attention_params(store, cfg.feature_channels, cfg.hidden_dim, num_classes, rng)
    return store


def fresh_state(cfg: Config, num_classes: int) -> TrainState:
    params = build_params(cfg, num_classes)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 1)))
    return TrainState(params=params, rng=rng)


# ---------------------------------------------------------------------------
# detector phase


def _sample_anchor_batch(labels: np.ndarray, matched: np.ndarray, rng, batch_size: int):
    """Up to ``batch_size`` anchors, at most half positive, positives first."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), batch_size // 2)
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), batch_size - len(pos))
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    idx = np.concatenate([pos, neg]).astype(np.int64)
    return idx, len(pos)


def shape_detection_loss(ctx: RunContext, store: ParamStore, entry: DatasetEntry,
                         rng) -> Tensor:
    """Mean detection loss over the V views of one shape (differentiable)."""
    cfg = ctx.cfg
    views = ctx.load_views(entry)
    assignment = ctx.anchor_assignment(entry)
    terms = []
    for vi in range(cfg.views):
        labels, matched, gt_boxes = assignment[vi]
        idx, n_pos = _sample_anchor_batch(labels, matched, rng, cfg.anchor_batch)
        if idx.size == 0:
            continue
        fm = backbone_forward(store, Tensor(views[vi]), cfg.backbone_blocks,
                              cfg.backbone_valid_conv)
        p, reg = score_sampled_anchors(store, fm, ctx.layout, idx)
        if n_pos:
            t_star = np.stack([encode_bbox(ctx.layout.anchors[a], gt_boxes[matched[a]])
                               for a in idx[:n_pos]])
            reg_pos = T.slice_rows(reg, 0, n_pos)
        else:
            t_star = np.zeros((0, 4))
            reg_pos = None
        terms.append(detection_loss(p, labels[idx], reg_pos, t_star,
                                    reg_weight=cfg.lambda_, smooth=cfg.smooth_l1))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def train_detector_epoch(ctx: RunContext, state: TrainState) -> float:
    """One pass over training shapes, updating detector parameters only."""
    cfg = ctx.cfg
    order = state.rng.permutation(len(ctx.train_entries))
    losses = []
    for oi in order:
        entry = ctx.train_entries[oi]
        state.params.zero_grad()
        loss = shape_detection_loss(ctx, state.params, entry, state.rng)
        T.backward(loss)
        adam_step(state.params.subset("det."), cfg.lr, cfg.adam_beta1,
                  cfg.adam_beta2, cfg.adam_eps)
        losses.append(float(loss.data))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# feature extraction (frozen detector)


def extract_shape_features(ctx: RunContext, weights: DetectorWeights,
                           entry: DatasetEntry) -> np.ndarray:
    """(V, K, D) top-K part features per view under the frozen detector."""
    cfg = ctx.cfg
    views = ctx.load_views(entry)
    out = np.zeros((cfg.views, cfg.k_parts, cfg.feature_channels))
    for vi in range(cfg.views):
        fm = backbone_forward_raw(weights, views[vi])
        scores, encodings, pooled = score_all_anchors(weights, fm, ctx.layout)
        if scores.size == 0:
            raise DetectionError(f"no proposals for {entry.shape_id} view {vi}")
        if cfg.nms:
            boxes = decode_array(ctx.layout.centers, encodings, cfg.image_size)
            keep = nms_filter(scores, boxes, cfg.nms_iou)
            sel = keep[top_k_indices(scores[keep], cfg.k_parts)]
        else:
            sel = top_k_indices(scores, cfg.k_parts)
        out[vi] = gsp_features_from_pooled(pooled, ctx.layout.inverse, sel)
    return out


def extract_features(ctx: RunContext, store: ParamStore,
                     entries: list[DatasetEntry]) -> dict[str, np.ndarray]:
    weights = DetectorWeights(store, ctx.cfg.backbone_blocks, ctx.cfg.backbone_valid_conv)
    return {e.shape_id: extract_shape_features(ctx, weights, e) for e in entries}


def evaluate_detection(ctx: RunContext, store: ParamStore,
                       entries: list[DatasetEntry], iou_threshold: float = 0.5) -> float:
    """Recall of GT part boxes under the top-N decoded proposals per view."""
    cfg = ctx.cfg
    weights = DetectorWeights(store, cfg.backbone_blocks, cfg.backbone_valid_conv)
    preds, gts = [], []
    for entry in entries:
        views = ctx.load_views(entry)
        gt = ctx.load_gt(entry)
        for vi in range(cfg.views):
            fm = backbone_forward_raw(weights, views[vi])
            scores, encodings, _ = score_all_anchors(weights, fm, ctx.layout)
            top = top_k_indices(scores, cfg.recall_top_n)
            preds.append(decode_array(ctx.layout.centers[top], encodings[top],
                                      cfg.image_size))
            gts.append(gt.get(vi, []))
    return detection_recall(preds, gts, iou_threshold)


# ---------------------------------------------------------------------------
# classifier phase


def classifier_shape_loss(ctx: RunContext, store: ParamStore, entry: DatasetEntry,
                          features: np.ndarray, num_classes: int,
                          mode: AttentionMode) -> Tensor:
    parts = [Tensor(features[vi]) for vi in range(ctx.cfg.views)]
    out = shape_forward(store, parts, mode)
    return classification_loss(out.probabilities, one_hot(entry.label, num_classes))


def train_classifier_epoch(ctx: RunContext, state: TrainState,
                           features: dict[str, np.ndarray],
                           mode: AttentionMode | None = None) -> float:
    """One pass over training shapes, updating attention parameters only."""
    cfg = ctx.cfg
    mode = mode or ctx.mode
    num_classes = len(ctx.dataset.classes)
    order = state.rng.permutation(len(ctx.train_entries))
    losses = []
    for oi in order:
        entry = ctx.train_entries[oi]
        state.params.zero_grad()
        loss = classifier_shape_loss(ctx, state.params, entry,
                                     features[entry.shape_id], num_classes, mode)
        T.backward(loss)
        adam_step(state.params.subset("att."), cfg.lr, cfg.adam_beta1,
                  cfg.adam_beta2, cfg.adam_eps)
        losses.append(float(loss.data))
    return float(np.mean(losses))


def mean_classifier_loss(ctx: RunContext, store: ParamStore,
                         features: dict[str, np.ndarray],
                         entries: list[DatasetEntry],
                         mode: AttentionMode | None = None) -> float:
    mode = mode or ctx.mode
    num_classes = len(ctx.dataset.classes)
    vals = [float(classifier_shape_loss(ctx, store, e, features[e.shape_id],
                                        num_classes, mode).data)
            for e in entries]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# evaluation


def accuracies_from_confusion(confusion: np.ndarray) -> tuple[float, float]:
    """(instance, class) accuracy: trace over total, and the unweighted mean
    of per-class accuracies over classes that have samples."""
    total = confusion.sum()
    if total == 0:
        raise DataError("empty confusion matrix")
    instance = float(np.trace(confusion)) / float(total)
    row_sums = confusion.sum(axis=1)
    present = row_sums > 0
    per_class = confusion.diagonal()[present] / row_sums[present]
    return instance, float(np.mean(per_class))


def evaluate(ctx: RunContext, store: ParamStore, entries: list[DatasetEntry],
             features: dict[str, np.ndarray] | None = None,
             mode: AttentionMode | None = None) -> EvalReport:
    """Argmax classification over a split; ties take the lowest class index."""
    if not entries:
        raise DataError("evaluate called on an empty split")
    mode = mode or ctx.mode
    if features is None:
        features = extract_features(ctx, store, entries)
    c = len(ctx.dataset.classes)
    confusion = np.zeros((c, c), dtype=np.int64)
    predictions = []
    for entry in entries:
        parts = [Tensor(features[entry.shape_id][vi]) for vi in range(ctx.cfg.views)]
        probs = shape_forward(store, parts, mode).probabilities.data[0]
        pred = int(np.argmax(probs))
        confusion[entry.label, pred] += 1
        predictions.append((entry.shape_id, entry.label, pred, probs.copy()))
    instance, class_acc = accuracies_from_confusion(confusion)
    return EvalReport(instance_accuracy=instance, class_accuracy=class_acc,
                      confusion=confusion, predictions=predictions)


def write_confusion_csv(path: str, report: EvalReport, classes: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(classes)
        for row in report.confusion:
            writer.writerow([int(v) for v in row])


def write_predictions_csv(path: str, report: EvalReport, num_classes: int) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["shape_id", "true_label", "pred_label"]
                        + [f"p_{i + 1}" for i in range(num_classes)])
        for shape_id, true, pred, probs in report.predictions:
            writer.writerow([shape_id, true, pred] + [f"{p:.9g}" for p in probs])


# ---------------------------------------------------------------------------
# alternating training


class MetricsLog:
    """metrics.csv (phase losses) and totals.csv (combined objective)."""

    def __init__(self, out_dir: str, resume: bool = False):
        os.makedirs(out_dir, exist_ok=True)
        self.metrics_path = os.path.join(out_dir, "metrics.csv")
        self.totals_path = os.path.join(out_dir, "totals.csv")
        if not resume or not os.path.exists(self.metrics_path):
            with open(self.metrics_path, "w", encoding="utf-8", newline="") as fh:
                fh.write("round,phase,epoch,mean_loss\n")
            with open(self.totals_path, "w", encoding="utf-8", newline="") as fh:
                fh.write("round,phase,epoch,det_loss,cls_loss,total\n")

    def log(self, rnd: int, phase: str, epoch: int, mean_loss: float,
            det_loss: float, cls_loss: float, psi: float) -> None:
        with open(self.metrics_path, "a", encoding="utf-8", newline="") as fh:
            fh.write(f"{rnd},{phase},{epoch},{mean_loss:.9g}\n")
        # full repr precision so total == det + psi * cls holds exactly on re-parse
        total = det_loss + psi * cls_loss
        with open(self.totals_path, "a", encoding="utf-8", newline="") as fh:
            fh.write(f"{rnd},{phase},{epoch},{det_loss!r},{cls_loss!r},{total!r}\n")


def checkpoint_tensors(state: TrainState) -> dict[str, np.ndarray]:
    tensors = {name: p.data for name, p in state.params.items()}
    tensors.update(dict(state.params.moment_arrays()))
    return tensors


def save_training_checkpoint(path: str, ctx: RunContext, state: TrainState) -> None:
    meta = {
        "completed_rounds": state.completed_rounds,
        "rng_state": rng_state_to_json(state.rng),
        "adam_steps": state.params.step_counts(),
        "classes": ctx.dataset.classes,
        "last_det_loss": state.last_det_loss,
        "last_cls_loss": state.last_cls_loss,
    }
    save_checkpoint(path, checkpoint_tensors(state), serialize_config(ctx.cfg), meta)


def restore_training_state(path: str, cfg: Config, num_classes: int) -> TrainState:
    """Rebuild a TrainState from a checkpoint written by alternating training."""
    _, meta, tensors = load_checkpoint(path)
    state = fresh_state(cfg, num_classes)
    for name, p in state.params.items():
        if name not in tensors:
            raise DataError(f"checkpoint missing parameter {name!r}")
        if tensors[name].shape != p.data.shape:
            raise DataError(f"checkpoint parameter {name!r} has shape "
                            f"{tensors[name].shape}, expected {p.data.shape}")
        p.data[...] = tensors[name]
        m = tensors.get(f"adam.m.{name}")
        v = tensors.get(f"adam.v.{name}")
        if m is not None:
            state.params.load_moments(name, "m", m)
        if v is not None:
            state.params.load_moments(name, "v", v)
    state.params.set_step_counts(meta.get("adam_steps", {}))
    state.rng = rng_from_json(meta["rng_state"])
    state.completed_rounds = int(meta.get("completed_rounds", 0))
    state.last_det_loss = float(meta.get("last_det_loss", float("nan")))
    state.last_cls_loss = float(meta.get("last_cls_loss", float("nan")))
    return state


def alternate_train(ctx: RunContext, state: TrainState,
                    log: MetricsLog | None = None) -> TrainState:
    """Detector phase then classifier phase, repeated for cfg.rounds.

    The combined-objective log pairs the live phase loss with the most
    recently evaluated loss of the frozen branch (refreshed at phase
    boundaries, where the frozen branch last changed).
    """
    cfg = ctx.cfg
    if log is None:
        log = MetricsLog(cfg.out_dir, resume=state.completed_rounds > 0)
    ckpt_dir = os.path.join(cfg.out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)

    if np.isnan(state.last_cls_loss):
        features = extract_features(ctx, state.params, ctx.train_entries)
        state.last_cls_loss = mean_classifier_loss(ctx, state.params, features,
                                                   ctx.train_entries)

    for rnd in range(state.completed_rounds + 1, cfg.rounds + 1):
        state.phase = "detector"
        for epoch in range(1, cfg.epochs_per_phase + 1):
            det_loss = train_detector_epoch(ctx, state)
            state.last_det_loss = det_loss
            state.loss_history.append((rnd, "detector", epoch, det_loss))
            log.log(rnd, "detector", epoch, det_loss,
                    det_loss, state.last_cls_loss, cfg.psi)

        features = extract_features(ctx, state.params, ctx.train_entries)
        state.phase = "classifier"
        for epoch in range(1, cfg.epochs_per_phase + 1):
            cls_loss = train_classifier_epoch(ctx, state, features)
            state.last_cls_loss = cls_loss
            state.loss_history.append((rnd, "classifier", epoch, cls_loss))
            log.log(rnd, "classifier", epoch, cls_loss,
                    state.last_det_loss, cls_loss, cfg.psi)

        if ctx.val_entries:
            val = evaluate(ctx, state.params, ctx.val_entries)
            val_path = os.path.join(cfg.out_dir, "validation.csv")
            new_file = not os.path.exists(val_path)
            with open(val_path, "a", encoding="utf-8", newline="") as fh:
                if new_file:
                    fh.write("round,instance_acc,class_acc\n")
                fh.write(f"{rnd},{val.instance_accuracy:.9g},{val.class_accuracy:.9g}\n")

        state.completed_rounds = rnd
        state.params.round_to_single_precision()
        save_training_checkpoint(os.path.join(ckpt_dir, f"round_{rnd}.fgpv"), ctx, state)
    return state


# ---------------------------------------------------------------------------
# ablations


def run_ablation(ctx: RunContext, state: TrainState,
                 modes: list[AttentionMode]) -> list[tuple[str, float, float]]:
    """Retrain the attention branch per mode from one shared initialization.

    The detector is the trained one from ``state`` and stays frozen; every
    mode sees identical initial attention weights and an identical
    training-order RNG, so mode is the only varying factor.
    """
    cfg = ctx.cfg
    num_classes = len(ctx.dataset.classes)
    features_train = extract_features(ctx, state.params, ctx.train_entries)
    features_test = extract_features(ctx, state.params, ctx.dataset.test)

    rows = []
    for mode in modes:
        store = ParamStore()
        for name, p in state.params.items():
            if name.startswith("det."):
                store.add(name, Tensor(p.data.copy(), requires_grad=True))
        init_rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 2)))
        init_attention_params(store, cfg.feature_channels, cfg.hidden_dim,
                              num_classes, init_rng)
        sub_state = TrainState(
            params=store,
            rng=np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 3))))
        for _ in range(cfg.rounds * cfg.epochs_per_phase):
            train_classifier_epoch(ctx, sub_state, features_train, mode)
        report = evaluate(ctx, store, ctx.dataset.test, features_test, mode)
        rows.append((mode.value, report.class_accuracy, report.instance_accuracy))
    return rows


def write_ablation_csv(path: str, rows: list[tuple[str, float, float]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["mode", "class_acc", "instance_acc"])
        for mode, class_acc, instance_acc in rows:
            writer.writerow([mode, f"{class_acc:.9g}", f"{instance_acc:.9g}"])
