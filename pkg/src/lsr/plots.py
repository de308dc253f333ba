"""Matplotlib figure rendering for the CLI report paths.

Every figure is written to a file next to its CSV counterpart; nothing here
feeds back into the numerics.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .synth import PERTURBATION_FAMILIES


def save_training_curves(metrics_csv, path) -> None:
    rows = _read_csv(metrics_csv)
    if not rows:
        return
    steps = [float(r["step"]) for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("ce", "clust", "perp", "norm", "em", "total"):
        vals = [float(r[key]) for r in rows]
        if np.isfinite(vals).any():
            axes[0].plot(steps, vals, label=key)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=7)
    miou = [float(r["target_miou"]) for r in rows]
    axes[1].plot(steps, miou, marker="o", ms=3)
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("target mIoU")
    axes[1].set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_iou_bars(report_csv, path) -> None:
    names, ious = [], []
    with open(report_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            if int(row["class_id"]) < 0:
                continue
            names.append(row["class_name"])
            val = row["iou"]
            ious.append(float(val) if val and val != "nan" else np.nan)
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names)), 3))
    ax.bar(range(len(names)), ious, color="tab:blue")
    ax.set_xticks(range(len(names)), names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("IoU")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_figure(plotdata_csv, path) -> None:
    rows = _read_csv(plotdata_csv)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for family in PERTURBATION_FAMILIES:
        pts = [(int(r["level"]), float(r["mean_masr"])) for r in rows if r["family"] == family]
        if pts:
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=family)
    ax.set_xlabel("intensity level")
    ax.set_ylabel("mASR")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_embedding_figure(pca_csv, path) -> None:
    rows = _read_csv(pca_csv)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    classes = sorted({int(r["class_id"]) for r in rows})
    cmap = plt.get_cmap("tab10")
    for c in classes:
        pts = np.array([[float(r["pc1"]), float(r["pc2"]), float(r["pc3"])]
                        for r in rows if int(r["class_id"]) == c])
        axes[0].scatter(pts[:, 0], pts[:, 1], s=6, color=cmap(c % 10), label=f"class{c}")
        axes[1].scatter(pts[:, 0], pts[:, 2], s=6, color=cmap(c % 10))
    axes[0].set_xlabel("pc1")
    axes[0].set_ylabel("pc2")
    axes[1].set_xlabel("pc1")
    axes[1].set_ylabel("pc3")
    axes[0].legend(fontsize=7, markerscale=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_scene_preview(images, label_maps, path, max_scenes: int = 4) -> None:
    n = min(len(images), max_scenes)
    fig, axes = plt.subplots(2, n, figsize=(2.2 * n, 4.6), squeeze=False)
    for i in range(n):
        axes[0][i].imshow(images[i])
        axes[1][i].imshow(label_maps[i].data, cmap="tab10", interpolation="nearest")
        for ax in (axes[0][i], axes[1][i]):
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0][0].set_ylabel("image")
    axes[1][0].set_ylabel("labels")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(summary_csv, path) -> None:
    rows = _read_csv(summary_csv)
    labels = [r["config"] for r in rows]
    means = [float(r["mean_miou"]) for r in rows]
    stds = [float(r["std_miou"]) for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(labels)), 3.2))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=3, color="tab:orange")
    ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("target mIoU")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
