"""Static matplotlib figures for reports and the visualization commands.

Every figure is written as PNG with the Agg backend and fixed metadata, so
re-rendering the same arrays gives identical files.
"""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.interpolation": "nearest",
}
_METADATA = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_METADATA)
    plt.close(fig)
    return path


def _blank(ax):
    ax.set_xticks([])
    ax.set_yticks([])
    for spine in ax.spines.values():
        spine.set_visible(False)


def plot_triptych(triptych, path, caption: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.8))
        panels = (triptych.original, triptych.masked_view, triptych.reconstruction)
        for ax, img, title in zip(axes, panels, ("original", "masked", "reconstruction")):
            ax.imshow(img)
            ax.set_title(title)
            _blank(ax)
        if caption:
            fig.suptitle(caption)
        fig.tight_layout()
        return _save(fig, path)


def plot_codeword_grids(grids: dict, path) -> Path:
    """Overview of several codeword grids; empty codewords are labelled as such."""
    codes = sorted(grids)
    cols = min(4, max(1, len(codes)))
    rows = max(1, math.ceil(len(codes) / cols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows), squeeze=False)
        for ax in axes.flat:
            _blank(ax)
        for ax, code in zip(axes.flat, codes):
            g = grids[code]
            if g.count:
                ax.imshow(g.grid)
                ax.set_title(f"codeword {code} (n={g.count})")
            else:
                ax.text(0.5, 0.5, "no patches", ha="center", va="center", transform=ax.transAxes)
                ax.set_title(f"codeword {code}")
        fig.tight_layout()
        return _save(fig, path)


def plot_gradcam(image: np.ndarray, heatmap: np.ndarray, path, caption: str = "", word: str = "",
                 alpha: float = 0.5) -> Path:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(5.2, 2.8))
        axes[0].imshow(image)
        axes[0].set_title("image")
        axes[1].imshow(image)
        axes[1].imshow(heatmap, cmap="jet", alpha=alpha, vmin=0.0, vmax=1.0, interpolation="nearest")
        axes[1].set_title(f"word: {word}" if word else "grad-cam")
        for ax in axes:
            _blank(ax)
        if caption:
            fig.suptitle(caption)
        fig.tight_layout()
        return _save(fig, path)


def plot_retrieval(metrics: dict, path, title: str = "zero-shot retrieval") -> Path:
    ks = (1, 5, 10)
    x = np.arange(len(ks))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        for off, d, label in ((-0.2, "tr", "TR"), (0.2, "ir", "IR")):
            ax.bar(x + off, [metrics[f"{d}_r{k}"] for k in ks], width=0.4, label=label)
        ax.set_xticks(x, [f"R@{k}" for k in ks])
        ax.set_ylim(0, 1)
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(table, path, column: str = "tr_r1") -> Path:
    names = [r.name for r in table.rows]
    means = [r.mean(column) for r in table.rows]
    stds = [r.std(column) for r in table.rows]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(np.arange(len(names)), means, yerr=stds, capsize=3, color="tab:blue")
        ax.set_xticks(np.arange(len(names)), names, rotation=10)
        ax.set_ylabel(f"{column[:2].upper()} R@{column[4:]}")
        ax.set_title(f"ablation over seeds {','.join(map(str, table.seeds))}")
        fig.tight_layout()
        return _save(fig, path)


def plot_training_curves(records: list, path, keys=("total", "itm", "mlm", "mim", "pixel")) -> Path:
    steps = [r["step"] for r in records if "step" in r and "total" in r]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        for key in keys:
            ys = [r.get(key) for r in records if "step" in r and "total" in r]
            ys = np.array([np.nan if y is None else y for y in ys], dtype=float)
            if np.isfinite(ys).any():
                ax.plot(steps, ys, label=key, linewidth=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
