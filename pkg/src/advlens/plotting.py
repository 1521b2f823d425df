"""Matplotlib figures written next to the CSV tables they visualize."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    # no Software/date metadata, so re-runs are byte-identical
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def heatmap(path, matrix, row_labels, col_labels, title="", xlabel="", ylabel="", fmt="{:.0%}",
            cmap="Reds"):
    matrix = np.asarray(matrix, dtype=float)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(col_labels), 0.8 + 0.5 * len(row_labels)))
        im = ax.imshow(matrix, cmap=cmap, vmin=0.0, vmax=max(1.0, float(np.nanmax(matrix))))
        ax.set_xticks(range(len(col_labels)), labels=[str(c) for c in col_labels])
        ax.set_yticks(range(len(row_labels)), labels=[str(r) for r in row_labels])
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                v = matrix[i, j]
                ax.text(j, i, fmt.format(v), ha="center", va="center", fontsize=7,
                        color="white" if v > 0.6 else "black")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        _save(fig, path)


def line_plot(path, x, series: dict, xlabel="", ylabel="", title="", styles: dict | None = None):
    styles = styles or {}
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 3.0))
        for name, ys in series.items():
            ax.plot(x, ys, styles.get(name, "-"), label=name, linewidth=1.4)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        if len(series) > 1:
            ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def grouped_bars(path, groups, series: dict, ylabel="", title=""):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.5 + 0.9 * len(groups), 3.0))
        width = 0.8 / max(len(series), 1)
        pos = np.arange(len(groups))
        for k, (name, vals) in enumerate(series.items()):
            ax.bar(pos + (k - (len(series) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(pos, labels=[str(g) for g in groups])
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 1)
        ax.set_title(title)
        ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)
