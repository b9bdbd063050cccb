"""Report figures rendered next to the delimited outputs (CSV/JSON)."""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .images import ImageBuffer


def save_trace_csv(path: str | os.PathLike, trace: list[tuple[int, float]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        for it, loss in trace:
            writer.writerow([it, repr(float(loss))])


def loss_curve(path: str | os.PathLike, trace: list[tuple[int, float]],
               title: str = "loss") -> None:
    fig, ax = plt.subplots(figsize=(5.0, 3.2))
    if trace:
        its = [it for it, _ in trace]
        losses = [max(v, 1e-30) for _, v in trace]
        ax.semilogy(its, losses, lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("MSE loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def image_panel(path: str | os.PathLike,
                panels: list[tuple[str, ImageBuffer | np.ndarray]]) -> None:
    """One row of images; grayscale arrays render with a colormap."""
    fig, axes = plt.subplots(1, len(panels),
                             figsize=(2.6 * len(panels), 2.8), squeeze=False)
    for ax, (title, img) in zip(axes[0], panels):
        data = img.pixels if isinstance(img, ImageBuffer) else np.asarray(img)
        if data.ndim == 2:
            ax.imshow(data, cmap="magma")
        else:
            ax.imshow(np.clip(data, 0, 1))
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def edit_report(out_dir: str, before: ImageBuffer, after: ImageBuffer,
                target: ImageBuffer, region: np.ndarray,
                trace: list[tuple[int, float]], name: str = "edit") -> None:
    loss_curve(os.path.join(out_dir, f"{name}_loss.png"), trace,
               title=f"{name} optimization")
    diff = np.abs(after.pixels - before.pixels).mean(axis=2)
    image_panel(os.path.join(out_dir, f"{name}_views.png"), [
        ("before", before),
        ("after", after),
        ("oracle target", target),
        ("|after - before|", diff),
        ("edit region", region.astype(float)),
    ])


def metrics_figure(path: str | os.PathLike, before: ImageBuffer,
                   after: ImageBuffer, region: np.ndarray) -> None:
    diff = np.abs(after.pixels - before.pixels).mean(axis=2)
    image_panel(path, [
        ("original", before),
        ("edited", after),
        ("|diff|", diff),
        ("edited region", region.astype(float)),
    ])
