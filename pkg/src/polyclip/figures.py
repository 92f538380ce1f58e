"""Matplotlib figure rendering for CLI reports (Agg backend, file output)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import LayoutAdherenceReport
from .pathclip import LayoutScene

plt.rcParams.update({"figure.dpi": 120, "font.size": 8, "axes.titlesize": 8})


def _finish(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def save_image_grid(images, path, titles=None, cols: int = 8) -> Path:
    n = len(images)
    cols = min(cols, max(n, 1))
    rows = math.ceil(n / cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.4 * cols, 1.5 * rows), squeeze=False)
    for i, ax in enumerate(axes.ravel()):
        ax.axis("off")
        if i < n:
            ax.imshow(np.clip(images[i], 0, 1), interpolation="nearest")
            if titles is not None:
                ax.set_title(titles[i])
    return _finish(fig, path)


def save_polygon_overlay(image, scene: LayoutScene, path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(3.2, 3.2))
    if image is not None:
        ax.imshow(np.clip(image, 0, 1), interpolation="nearest", extent=(0, scene.canvas_w, scene.canvas_h, 0))
    for prim in scene.primitives:
        pts = list(prim.path.clip_points)
        xs = [p[0] for p in pts] + [pts[0][0]]
        ys = [p[1] for p in pts] + [pts[0][1]]
        ax.plot(xs, ys, lw=1.4, label=prim.appearance.text)
        ax.annotate(
            prim.appearance.text,
            (prim.path.cx, prim.path.cy),
            color="white",
            ha="center",
            fontsize=7,
        )
    ax.set_xlim(0, scene.canvas_w)
    ax.set_ylim(scene.canvas_h, 0)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def save_energy_curves(diagnostics: list[dict], path, reference: list[dict] | None = None) -> Path:
    """Per-step energy curves; `reference` overlays an unguided run's g_sf."""
    fig, ax = plt.subplots(figsize=(4.2, 2.8))
    if diagnostics:
        ts = [d["t"] for d in diagnostics]
        for key in ("g_sf", "g_sb", "g_a"):
            ax.plot(ts, [d[key] for d in diagnostics], label=key, lw=1.2)
        if reference:
            ax.plot(
                [d["t"] for d in reference],
                [d["g_sf"] for d in reference],
                label="g_sf (unguided)",
                lw=1.0,
                ls="--",
                color="0.4",
            )
        ax.invert_xaxis()
        ax.set_yscale("symlog", linthresh=1e-8)
        ax.legend(frameon=False)
    ax.set_xlabel("t")
    ax.set_ylabel("energy")
    return _finish(fig, path)


def save_loss_curve(losses, path) -> Path:
    fig, ax = plt.subplots(figsize=(4.0, 2.6))
    ax.plot(np.arange(1, len(losses) + 1), losses, lw=1.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    return _finish(fig, path)


def save_adherence_batch(per_seed: list[dict], path) -> Path:
    """Median precision/recall bars per evaluation seed, 0.8 target line."""
    fig, ax = plt.subplots(figsize=(4.0, 2.6))
    idx = np.arange(len(per_seed))
    ax.bar(idx - 0.18, [s["precision"] for s in per_seed], width=0.36, label="precision", color="#4878d0")
    ax.bar(idx + 0.18, [s["recall"] for s in per_seed], width=0.36, label="recall", color="#ee854a")
    ax.set_xticks(idx)
    ax.set_xticklabels([f"seed {s['seed']}" for s in per_seed])
    ax.axhline(0.8, color="0.4", lw=0.8, ls="--")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("median over scenes")
    ax.legend(frameon=False, loc="lower right")
    return _finish(fig, path)


def save_adherence_summary(report: LayoutAdherenceReport, path) -> Path:
    fig, ax = plt.subplots(figsize=(3.4, 2.6))
    names = ["precision", "recall", "accuracy"]
    vals = [report.precision, report.recall, report.accuracy]
    ax.bar(names, vals, color=["#4878d0", "#ee854a", "#6acc64"])
    ax.set_ylim(0, 1.05)
    for i, v in enumerate(vals):
        ax.text(i, v + 0.02, f"{v:.2f}", ha="center", fontsize=7)
    ax.set_title(f"TP={report.tp} FP={report.fp} FN={report.fn}")
    return _finish(fig, path)
