"""Run reports: per-iteration CSV plus loss-curve and snapshot figures."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .rasterizer import RenderSettings, render  # noqa: E402


def term_names(terms: list) -> list:
    names = []
    for t in terms:
        for k in t:
            if k not in names:
                names.append(k)
    return names


def write_history_csv(history, terms, path) -> None:
    """One row per iteration: ``iteration,loss,<term>...``."""
    names = term_names(terms)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", *names])
        for i, (loss, t) in enumerate(zip(history, terms), start=1):
            w.writerow([i, f"{loss:.9g}", *(f"{t.get(n, float('nan')):.9g}" for n in names)])


def smoothed(values, window: int = 5) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v.copy()
    return np.convolve(v, np.ones(window) / window, mode="valid")


def plot_loss(history, terms, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    it = np.arange(1, len(history) + 1)
    ax.plot(it, history, color="black", lw=1.5, label="total")
    for name in term_names(terms):
        ax.plot(it, [t.get(name, np.nan) for t in terms], lw=0.8, alpha=0.8, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, loc="upper right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_snapshots(snapshots: dict, path, settings: RenderSettings | None = None, max_columns: int = 6) -> None:
    steps = sorted(snapshots)
    if len(steps) > max_columns:
        pick = np.unique(np.linspace(0, len(steps) - 1, max_columns).round().astype(int))
        steps = [steps[i] for i in pick]
    fig, axes = plt.subplots(1, len(steps), figsize=(2.2 * len(steps), 2.4), dpi=100, squeeze=False)
    for ax, step in zip(axes[0], steps):
        ax.imshow(render(snapshots[step], settings), interpolation="nearest")
        ax.set_title(f"step {step}", fontsize=9)
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def write_report(run, directory, settings: RenderSettings | None = None) -> list:
    """Write ``history.csv``, ``loss.png`` and ``snapshots.png``; return their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = [d / "history.csv", d / "loss.png", d / "snapshots.png"]
    write_history_csv(run.history, run.terms, out[0])
    plot_loss(run.history, run.terms, out[1])
    plot_snapshots(run.snapshots, out[2], settings)
    return out
