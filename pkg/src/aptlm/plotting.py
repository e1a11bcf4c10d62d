"""Report figures (written next to the CSVs they are drawn from)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .storage import read_metrics  # noqa: E402


def _smooth(y, k):
    if len(y) < k or k <= 1:
        return np.asarray(y, dtype=float)
    c = np.cumsum(np.insert(np.asarray(y, dtype=float), 0, 0.0))
    return (c[k:] - c[:-k]) / k


def loss_curves(metrics_csv, path=None, window=25):
    """One panel per stage, raw loss plus a moving average."""
    rows = read_metrics(metrics_csv)
    stages = []
    for r in rows:
        if r["stage"] not in stages:
            stages.append(r["stage"])
    if not stages:
        raise ValueError(f"{metrics_csv} has no rows")
    fig, axes = plt.subplots(1, len(stages), figsize=(4 * len(stages), 3), squeeze=False)
    for ax, st in zip(axes[0], stages):
        sel = [r for r in rows if r["stage"] == st]
        x = np.array([int(r["step"]) for r in sel])
        y = np.array([float(r["loss"]) for r in sel])
        ax.plot(x, y, lw=0.5, alpha=0.4, color="tab:blue")
        s = _smooth(y, window)
        ax.plot(x[len(x) - len(s):], s, color="tab:blue")
        ax.set_title(f"stage {st}")
        ax.set_xlabel("step")
        ax.set_yscale("log")
    axes[0][0].set_ylabel("loss")
    fig.tight_layout()
    path = Path(path or Path(metrics_csv).with_suffix(".png"))
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def ablation_bars(rows, metrics, path, title=""):
    """Grouped bars: one group per metric, one bar per arm. NaN (failed arm) draws as an empty slot."""
    arms = [r["arm"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.5 + 1.6 * len(metrics), 3))
    w = 0.8 / max(1, len(arms))
    for i, r in enumerate(rows):
        vals = [float(r[m]) for m in metrics]
        ax.bar(np.arange(len(metrics)) + i * w, np.nan_to_num(vals), w, label=arms[i])
    ax.set_xticks(np.arange(len(metrics)) + w * (len(arms) - 1) / 2)
    ax.set_xticklabels(metrics, fontsize=8)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def fewshot_sweep(results, path, chance=True):
    """``results`` maps ways -> accuracy (one curve) or label -> {ways: accuracy}."""
    if results and not isinstance(next(iter(results.values())), dict):
        results = {"exact match": results}
    fig, ax = plt.subplots(figsize=(4, 3))
    allways = set()
    for label, curve in results.items():
        ways = sorted(curve)
        allways.update(ways)
        ax.plot(ways, [curve[w] for w in ways], marker="o", label=label)
    if chance and allways:
        w = np.array(sorted(allways))
        ax.plot(w, 1.0 / w, ls="--", color="gray", label="chance")
    ax.set_xlabel("ways")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.02)
    if allways:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
