"""Accuracy-vs-cost report: CSV, plot-data JSON and figures."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import plotting
from .harness import ExitReport

RETRIEVAL_COLUMNS = ["mrr", "ndcg", "map", "recall_at_1", "recall_at_5"]
# clone-detection columns come after the fixed retrieval prefix
CLONE_COLUMNS = ["precision", "recall", "f1"]
CSV_COLUMNS = ["exit", "task", "gflops", *RETRIEVAL_COLUMNS, *CLONE_COLUMNS]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def report_rows(reports: Sequence[ExitReport]) -> list[dict]:
    rows = []
    for r in sorted(reports, key=lambda r: (r.exit, r.task)):
        row = {"exit": str(r.exit), "task": r.task, "gflops": _fmt(r.gflops)}
        for col in RETRIEVAL_COLUMNS + CLONE_COLUMNS:
            row[col] = _fmt(r.metrics.get(col))
        rows.append(row)
    return rows


def self_distillation_deltas(multi: Sequence[ExitReport], single: Sequence[ExitReport],
                             task: str = "t2c_sd_delta") -> list[ExitReport]:
    """Per-exit metric differences, multi-exit minus single-exit baseline."""
    base = {r.exit: r for r in single}
    out = []
    for r in multi:
        if r.exit in base:
            b = base[r.exit]
            keys = [k for k in r.metrics if k in b.metrics]
            out.append(ExitReport(r.exit, task, {k: r.metrics[k] - b.metrics[k] for k in keys}, r.gflops))
    return out


def plot_tradeoff(reports: Sequence[ExitReport], path: str | Path, metrics: Sequence[str] | None = None) -> Path:
    metrics = list(metrics or ["mrr", "map", "f1"])
    fig, ax = plotting.new(5.5)
    tasks = sorted({r.task for r in reports if not r.task.endswith("_delta")})
    for task in tasks:
        rs = sorted((r for r in reports if r.task == task), key=lambda r: r.exit)
        for m in metrics:
            pts = [(r.gflops, r.metrics[m], r.exit) for r in rs if m in r.metrics]
            if not pts:
                continue
            xs, ys, ex = zip(*pts)
            ax.plot(xs, ys, marker="o", label=f"{task} {m}")
            for x, y, e in pts:
                ax.annotate(f"L{e}", (x, y), textcoords="offset points", xytext=(3, 3), fontsize=7)
    ax.set_xlabel("GFLOPs per forward pass")
    ax.set_ylabel("metric value")
    ax.set_title("cost vs. quality by exit layer")
    if ax.lines:
        ax.legend(loc="lower right")
    return plotting.save(fig, path)


def tradeoff_report(reports: Sequence[ExitReport], out_path: str | Path, figure: bool = True) -> dict[str, Path]:
    """Write ``<out>.csv``, ``<out>_plot.json`` and (optionally) ``<out>.png``."""
    out_path = Path(out_path)
    csv_path = out_path.with_suffix(".csv")
    plot_path = out_path.with_name(out_path.stem + "_plot.json")
    rows = report_rows(reports)
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    points = [{"exit": r.exit, "task": r.task, "gflops": r.gflops, "metric": m, "value": v}
              for r in sorted(reports, key=lambda r: (r.exit, r.task))
              for m, v in sorted(r.metrics.items())]
    plot_path.write_text(json.dumps(points, indent=1), encoding="utf-8")
    out = {"csv": csv_path, "plot_data": plot_path}
    if figure:
        out["figure"] = plot_tradeoff(reports, out_path.with_suffix(".png"))
    return out


def read_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def plot_permtest_heatmap(exits: Sequence[int], mean_scores: Mapping[int, float],
                          pvalues: Mapping[tuple[int, int], float], path: str | Path) -> Path:
    """Exit-by-exit grid of mean-score differences, starred by significance."""
    n = len(exits)
    grid = np.zeros((n, n))
    for i, a in enumerate(exits):
        for j, b in enumerate(exits):
            grid[i, j] = mean_scores[a] - mean_scores[b]
    fig, ax = plotting.new(4.0, 1.0)
    lim = float(np.abs(grid).max()) or 1.0
    im = ax.imshow(grid, cmap="RdBu_r", vmin=-lim, vmax=lim)
    ax.set_xticks(range(n), [f"L{e}" for e in exits])
    ax.set_yticks(range(n), [f"L{e}" for e in exits])
    for i, a in enumerate(exits):
        for j, b in enumerate(exits):
            if i == j:
                continue
            p = pvalues.get((a, b), pvalues.get((b, a)))
            star = "**" if p is not None and p < 0.001 else "*" if p is not None and p < 0.05 else ""
            ax.text(j, i, f"{grid[i, j]:+.3f}{star}", ha="center", va="center", fontsize=6)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04, label="mean similarity difference (row - col)")
    return plotting.save(fig, path)
