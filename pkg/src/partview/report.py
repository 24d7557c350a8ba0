"""Render training/evaluation figures from a run directory's CSV outputs.

Every figure is written as PNG next to the delimited files it summarizes;
missing inputs are skipped with a note rather than failing the command.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _read_csv(path: str) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def plot_phase_losses(metrics_csv: str, out_png: str) -> None:
    rows = _read_csv(metrics_csv)
    fig, ax = plt.subplots(figsize=(7, 4))
    for phase, color in (("detector", "tab:blue"), ("classifier", "tab:orange")):
        xs, ys = [], []
        for i, r in enumerate(rows):
            if r["phase"] == phase:
                xs.append(i + 1)
                ys.append(float(r["mean_loss"]))
        if xs:
            ax.plot(xs, ys, marker="o", ms=3, color=color, label=f"{phase} loss")
    ax.set_xlabel("logged epoch index")
    ax.set_ylabel("mean loss")
    ax.set_title("Per-phase training losses")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def plot_total_loss(totals_csv: str, out_png: str) -> None:
    rows = _read_csv(totals_csv)
    xs = np.arange(1, len(rows) + 1)
    total = [float(r["total"]) for r in rows]
    det = [float(r["det_loss"]) for r in rows]
    cls = [float(r["cls_loss"]) for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(xs, total, color="black", label="combined objective")
    ax.plot(xs, det, color="tab:blue", alpha=0.6, label="detection component")
    ax.plot(xs, cls, color="tab:orange", alpha=0.6, label="classification component")
    ax.set_xlabel("logged epoch index")
    ax.set_ylabel("loss")
    ax.set_title("Combined training objective")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def plot_confusion(confusion_csv: str, out_png: str) -> None:
    with open(confusion_csv, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        classes = next(reader)
        matrix = np.array([[int(v) for v in row] for row in reader])
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(len(classes)), classes, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(len(classes)), classes, fontsize=8)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, str(matrix[i, j]), ha="center", va="center",
                    color="white" if matrix[i, j] > matrix.max() / 2 else "black")
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title("Test confusion matrix")
    fig.colorbar(im, shrink=0.8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def plot_ablation(ablation_csv: str, out_png: str) -> None:
    rows = _read_csv(ablation_csv)
    modes = [r["mode"] for r in rows]
    inst = [float(r["instance_acc"]) for r in rows]
    cls = [float(r["class_acc"]) for r in rows]
    x = np.arange(len(modes))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(x - 0.2, inst, width=0.4, label="instance accuracy", color="tab:blue")
    ax.bar(x + 0.2, cls, width=0.4, label="class accuracy", color="tab:orange")
    ax.set_xticks(x, [m.upper() for m in modes])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title("Attention-mode ablation")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=130)
    plt.close(fig)


def render_report(run_dir: str) -> list[str]:
    """Render every figure whose source CSV exists; returns written paths."""
    out_dir = os.path.join(run_dir, "report")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    jobs = [
        (os.path.join(run_dir, "metrics.csv"), "losses.png", plot_phase_losses),
        (os.path.join(run_dir, "totals.csv"), "total_loss.png", plot_total_loss),
        (os.path.join(run_dir, "eval", "confusion.csv"), "confusion.png", plot_confusion),
        (os.path.join(run_dir, "ablation.csv"), "ablation.png", plot_ablation),
    ]
    for src, name, fn in jobs:
        if os.path.exists(src):
            dst = os.path.join(out_dir, name)
            fn(src, dst)
            written.append(dst)
    return written
