"""Command-line surface.

Subcommands: gen-data, render, gsp-gt, train, eval, ablate, grad-check,
export-attn, report.  Exit codes: 0 success, 1 usage/config error, 2 data
error, 3 numeric or contract failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .attention import (
    AttentionMode,
    cyclic_shift_sensitivity,
    export_attention_maps,
    shape_forward,
)
from .checkpoint import load_checkpoint
from .config import Config, load_config, parse_config, serialize_config
from .dataset import generate_dataset, load_dataset
from .detector import (
    DetectorWeights,
    backbone_forward_raw,
    decode_array,
    score_all_anchors,
    top_k_indices,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    DetectionError,
    DimensionError,
    GeometryError,
    NumericError,
    ParseError,
)
from .imageio import write_ppm
from .meshes import load_off, normalize_mesh
from .render import BBox, draw_box_outline, render_views
from .tensor import Tensor
from .training import (
    MetricsLog,
    RunContext,
    alternate_train,
    evaluate,
    evaluate_detection,
    extract_features,
    fresh_state,
    restore_training_state,
    run_ablation,
    write_ablation_csv,
    write_confusion_csv,
    write_predictions_csv,
)

USAGE_EXIT = 1
DATA_EXIT = 2
NUMERIC_EXIT = 3

VIS_SCORE_THRESHOLD = 0.8


def _load_run(cfg: Config):
    dataset = load_dataset(cfg.dataset_root)
    return RunContext(cfg, dataset)


def _require_gt(ctx: RunContext) -> None:
    missing = [e.shape_id for e in ctx.dataset.train + ctx.dataset.test
               if not os.path.exists(ctx.gt_path(e))]
    if missing:
        raise DataError(
            f"ground-truth boxes missing for {len(missing)} shapes "
            f"(first: {missing[0]}); run `partview gsp-gt --config <cfg>` first")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    root = args.out or cfg.dataset_root
    ds = generate_dataset(root, cfg.family, cfg.shapes_per_subcategory,
                          cfg.train_fraction, cfg.seed)
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test shapes "
          f"in {len(ds.classes)} subcategories under {root}")
    return 0


def cmd_render(args) -> int:
    cfg = load_config(args.config)
    if args.dataset:
        cfg.dataset_root = args.dataset
    ctx = _load_run(cfg)
    entries = ctx.dataset.train + ctx.dataset.test
    rendered = skipped = 0
    for entry in entries:
        out_dir = os.path.join(cfg.out_dir, "views", entry.shape_id)
        key_path = os.path.join(out_dir, "cache_key.txt")
        key = os.path.basename(ctx.view_cache_path(entry))
        if (os.path.exists(key_path)
                and open(key_path, encoding="utf-8").read().strip() == key
                and os.path.exists(ctx.view_cache_path(entry))):
            skipped += 1
            continue
        stack = ctx.load_views(entry)  # renders and fills the npy cache
        os.makedirs(out_dir, exist_ok=True)
        for vi in range(cfg.views):
            write_ppm(os.path.join(out_dir, f"view_{vi:02d}.ppm"),
                      stack[vi].transpose(1, 2, 0))
        with open(key_path, "w", encoding="utf-8") as fh:
            fh.write(key + "\n")
        rendered += 1
    print(f"rendered {rendered} shapes ({skipped} already cached), "
          f"{cfg.views} views each")
    return 0


def cmd_gsp_gt(args) -> int:
    cfg = load_config(args.config)
    if args.dataset:
        cfg.dataset_root = args.dataset
    ctx = _load_run(cfg)
    entries = ctx.dataset.train + ctx.dataset.test
    ctx.build_ground_truth(entries)
    print(f"ground-truth boxes ready for {len(entries)} shapes "
          f"under {os.path.join(cfg.out_dir, 'gt')}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    ctx = _load_run(cfg)
    _require_gt(ctx)
    if args.resume:
        state = restore_training_state(args.resume, cfg, len(ctx.dataset.classes))
        print(f"resuming after round {state.completed_rounds}")
        log = MetricsLog(cfg.out_dir, resume=True)
    else:
        state = fresh_state(cfg, len(ctx.dataset.classes))
        log = MetricsLog(cfg.out_dir, resume=False)
    state = alternate_train(ctx, state, log)
    recall = evaluate_detection(ctx, state.params, ctx.train_entries)
    print(f"training complete: {state.completed_rounds} rounds, "
          f"detector recall@0.5 (top {cfg.recall_top_n}) = {recall:.3f}")
    print(f"checkpoints under {os.path.join(cfg.out_dir, 'checkpoints')}")
    return 0


def _check_architecture_match(cfg: Config, snapshot: Config) -> None:
    arch_fields = ("views", "image_size", "feature_channels", "k_parts", "hidden_dim",
                   "head_dim", "anchor_scales", "anchor_ratios", "backbone_blocks",
                   "backbone_valid_conv")
    for name in arch_fields:
        if getattr(cfg, name) != getattr(snapshot, name):
            raise DataError(
                f"checkpoint was trained with {name}={getattr(snapshot, name)!r} "
                f"but the config says {getattr(cfg, name)!r}")


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    config_text, meta, _ = load_checkpoint(args.checkpoint)
    _check_architecture_match(cfg, parse_config(config_text))
    ctx = _load_run(cfg)
    if meta.get("classes") and meta["classes"] != ctx.dataset.classes:
        raise DataError(f"checkpoint classes {meta['classes']} do not match "
                        f"dataset classes {ctx.dataset.classes}")
    state = restore_training_state(args.checkpoint, cfg, len(ctx.dataset.classes))
    report = evaluate(ctx, state.params, ctx.dataset.test)
    out_dir = os.path.join(cfg.out_dir, "eval")
    os.makedirs(out_dir, exist_ok=True)
    write_confusion_csv(os.path.join(out_dir, "confusion.csv"), report,
                        ctx.dataset.classes)
    write_predictions_csv(os.path.join(out_dir, "predictions.csv"), report,
                          len(ctx.dataset.classes))
    print(f"test instance accuracy {report.instance_accuracy:.4f}, "
          f"class accuracy {report.class_accuracy:.4f}")
    print(f"wrote {out_dir}/confusion.csv and predictions.csv")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    ctx = _load_run(cfg)
    _require_gt(ctx)
    state = restore_training_state(args.checkpoint, cfg, len(ctx.dataset.classes))
    modes = [AttentionMode.parse(m) for m in args.modes.split(",")]
    rows = run_ablation(ctx, state, modes)
    path = os.path.join(cfg.out_dir, "ablation.csv")
    write_ablation_csv(path, rows)
    for mode, class_acc, inst_acc in rows:
        print(f"  {mode:5s} class {class_acc:.4f}  instance {inst_acc:.4f}")
    print(f"wrote {path}")
    return 0


def cmd_grad_check(args) -> int:
    cfg = load_config(args.config) if args.config else Config()
    from .gradsuite import TOLERANCE, run_gradient_suite, suite_passes
    results = run_gradient_suite(cfg.seed, print)
    if not suite_passes(results):
        worst = max(results, key=results.get)
        print(f"gradient check FAILED: {worst} at {results[worst]:.3e} "
              f">= {TOLERANCE}", file=sys.stderr)
        return NUMERIC_EXIT
    print("all gradient checks passed")
    return 0


def cmd_export_attn(args) -> int:
    config_text, meta, _ = load_checkpoint(args.checkpoint)
    cfg = parse_config(config_text)
    if args.dataset:
        cfg.dataset_root = args.dataset
    if args.out:
        cfg.out_dir = args.out
    ctx = _load_run(cfg)
    state = restore_training_state(args.checkpoint, cfg, len(ctx.dataset.classes))
    by_id = {e.shape_id: e for e in ctx.dataset.train + ctx.dataset.test}
    if args.shape not in by_id:
        raise DataError(f"shape {args.shape!r} not in dataset "
                        f"(have e.g. {next(iter(by_id))!r})")
    entry = by_id[args.shape]

    out_dir = os.path.join(cfg.out_dir, "viz", entry.shape_id.replace("/", "_"))
    os.makedirs(out_dir, exist_ok=True)
    views = ctx.load_views(entry)
    weights = DetectorWeights(state.params, cfg.backbone_blocks, cfg.backbone_valid_conv)
    features = extract_features(ctx, state.params, [entry])[entry.shape_id]
    parts = [Tensor(features[vi]) for vi in range(cfg.views)]
    fwd = shape_forward(state.params, parts, ctx.mode)

    export_attention_maps(fwd.part_attention_maps[0], fwd.view_attention_map, out_dir)
    for vi, q in enumerate(fwd.part_attention_maps):
        export_attention_maps(q, fwd.view_attention_map, out_dir, stem=f"view_{vi:02d}_")

    boxed_any = False
    for vi in range(cfg.views):
        fm = backbone_forward_raw(weights, views[vi])
        scores, encodings, _ = score_all_anchors(weights, fm, ctx.layout)
        strong = np.flatnonzero(scores > VIS_SCORE_THRESHOLD)
        img = views[vi].transpose(1, 2, 0).copy()
        if strong.size:
            boxed_any = True
            boxes = decode_array(ctx.layout.centers[strong], encodings[strong],
                                 cfg.image_size)
            order = np.argsort(-scores[strong])[:cfg.k_parts]
            for bi in order:
                x0, y0, x1, y1 = boxes[bi]
                draw_box_outline(img, BBox(x0, y0, x1, y1))
        write_ppm(os.path.join(out_dir, f"view_{vi:02d}_boxes.ppm"), img)
    if not boxed_any:
        print(f"warning: no proposal exceeded score {VIS_SCORE_THRESHOLD}; "
              f"views exported without boxes", file=sys.stderr)
    pred = int(np.argmax(fwd.probabilities.data))
    print(f"shape {entry.shape_id}: predicted class "
          f"{ctx.dataset.classes[pred]} (true {entry.subcategory})")
    sensitivity = cyclic_shift_sensitivity(state.params, parts, ctx.mode)
    print(f"view-order diagnostic: max probability shift under cyclic "
          f"view rotation = {sensitivity:.4f}")
    print(f"wrote attention maps and boxed views under {out_dir}")
    return 0


def cmd_report(args) -> int:
    from .report import render_report
    written = render_report(args.run_dir)
    if not written:
        raise DataError(f"no reportable CSV files found under {args.run_dir}")
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partview",
        description="Multi-view fine-grained shape classification pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic shape dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override dataset_root")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("render", help="render and cache views, export PPMs")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", help="override dataset_root")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("gsp-gt", help="build part ground-truth boxes")
    p.add_argument("--config", required=True)
    p.add_argument("--dataset", help="override dataset_root")
    p.set_defaults(fn=cmd_gsp_gt)

    p = sub.add_parser("train", help="alternating detector/classifier training")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="attention-mode ablation from a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modes", default="full,opa,ova,na,nr")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("grad-check", help="run the gradient-check suite")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("export-attn", help="attention heatmaps and boxed views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shape", required=True, help="shape id, e.g. chair_lowback/chair_lowback_000")
    p.add_argument("--dataset", help="override dataset_root from the checkpoint")
    p.add_argument("--out", help="override out_dir from the checkpoint")
    p.set_defaults(fn=cmd_export_attn)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE_EXIT if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except (ParseError, DataError, DetectionError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return DATA_EXIT
    except (NumericError, ContractError, DimensionError, GeometryError) as e:
        print(f"numeric/contract error: {e}", file=sys.stderr)
        return NUMERIC_EXIT
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return DATA_EXIT


if __name__ == "__main__":
    sys.exit(main())
