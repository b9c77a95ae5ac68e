"""Figures for evaluation reports, rendered off-screen to image files."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

NOVEL_COLOR = "#d95f02"
BASE_COLOR = "#7570b3"


def figsize(scale: float = 1.0, aspect: float = (math.sqrt(5.0) - 1.0) / 2.0):
    width = 5.5 * scale
    return width, width * aspect


def read_plot_data(path) -> list:
    """``(class, iou)`` rows from a ``class<TAB>iou`` file; ``nan`` stays NaN."""
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for ln in lines[1:]:
        if not ln.strip():
            continue
        name, val = ln.split("\t")
        rows.append((name, float(val)))
    return rows


def iou_bar_chart(report, path, title: str = ""):
    """Per-class IoU bars, novel classes highlighted; written to ``path``."""
    ids = sorted(report.per_class)
    names = [str(report.class_names.get(c, c)) for c in ids]
    vals = [0.0 if math.isnan(report.per_class[c]) else report.per_class[c] for c in ids]
    colors = [NOVEL_COLOR if c in report.novel_classes else BASE_COLOR for c in ids]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        ax.bar(range(len(ids)), vals, color=colors)
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_ylim(0.0, 1.0)
        ax.set_ylabel("IoU")
        for y, color, label in ((report.miou_novel, NOVEL_COLOR, "novel mIoU"),
                                (report.miou_base, BASE_COLOR, "base mIoU")):
            if not math.isnan(y):
                ax.axhline(y, color=color, ls="--", lw=0.8, label=f"{label} {y:.3f}")
        ax.legend(frameon=False, loc="upper right")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)
    return Path(path)
