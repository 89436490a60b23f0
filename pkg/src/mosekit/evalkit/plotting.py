"""Matplotlib defaults and small helpers for report figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "svg.hashsalt": "mosekit",
}

GOLDEN = (5 ** 0.5 - 1) / 2


def figsize(width_in: float = 5.0, ratio: float = GOLDEN) -> tuple[float, float]:
    return width_in, width_in * ratio


def new(width_in: float = 5.0, ratio: float = GOLDEN, **kw):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=figsize(width_in, ratio), **kw)
    return fig, ax


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(RC):
        # no Software/date metadata so identical data gives identical bytes
        fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path
