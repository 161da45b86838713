"""Figures written next to the text/JSON artifacts of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def loss_figure(curves: dict[str, list[float]], path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, ys in curves.items():
        ax.semilogy(np.arange(len(ys)), ys, label=label, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_grid(rows: dict[str, list[np.ndarray]], path, col_titles=None) -> None:
    """One labelled row of images per entry; depth maps (2-D) are shown in a colormap."""
    names = list(rows)
    ncol = max(len(v) for v in rows.values())
    fig, axes = plt.subplots(len(names), ncol, figsize=(1.6 * ncol, 1.7 * len(names)), squeeze=False)
    for i, name in enumerate(names):
        for j in range(ncol):
            ax = axes[i, j]
            ax.set_xticks([])
            ax.set_yticks([])
            if j < len(rows[name]):
                img = rows[name][j]
                if img.ndim == 2:
                    ax.imshow(img, cmap="viridis")
                else:
                    ax.imshow(np.clip(img, 0, 1))
            if j == 0:
                ax.set_ylabel(name, fontsize=8)
            if i == 0 and col_titles:
                ax.set_title(str(col_titles[j]), fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def search_figure(scores, path) -> None:
    """Sorted SSIM-gray scores of all pose-search candidates."""
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(np.sort(np.asarray(scores))[::-1], lw=1)
    ax.set_xlabel("candidate rank")
    ax.set_ylabel("SSIM-gray")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def metric_bars(rows: list[dict], path, keys=("ssim_depth", "ssim_gray")) -> None:
    """Grouped bars of the SSIM metrics per run, PSNR on a twin axis."""
    runs = [r["run"] for r in rows]
    x = np.arange(len(runs))
    width = 0.8 / (len(keys) + 1)
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(runs)), 3.2))
    for i, k in enumerate(keys):
        ax.bar(x + i * width, [r[k] for r in rows], width, label=k)
    ax.set_ylim(-0.1, 1.0)
    ax2 = ax.twinx()
    ax2.bar(x + len(keys) * width, [r["psnr"] for r in rows], width, color="gray", label="psnr")
    ax2.set_ylabel("PSNR (dB)")
    ax.set_xticks(x + width * len(keys) / 2)
    ax.set_xticklabels(runs, rotation=30, ha="right", fontsize=8)
    ax.legend(fontsize=8, loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
