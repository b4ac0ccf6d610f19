"""Report figures: loss curves, gate-similarity histogram, metric bars,
and spectrogram renders, written deterministically to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = {"dpi": 100, "metadata": {"Software": "avedit"}}


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_loss_curves(history: list[dict], keys: list[str], path: str | Path,
                     title: str = "training loss") -> Path:
    if not history:
        raise ValueError("empty loss history")
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.arange(1, len(history) + 1)
    for key in keys:
        ax.plot(steps, [h[key] for h in history], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    return _finish(fig, path)


def plot_scalar_curve(values: list[float], path: str | Path, ylabel: str,
                      title: str) -> Path:
    if not values:
        raise ValueError("empty curve")
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(1, len(values) + 1), values, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _finish(fig, path)


def plot_gate_histogram(sims: np.ndarray, r: float, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(np.asarray(sims).ravel(), bins=40, color="steelblue")
    ax.axvline(r, color="crimson", linestyle="--", label=f"threshold r={r:.3f}")
    ax.set_xlabel("per-frame audio-visual cosine similarity")
    ax.set_ylabel("count")
    ax.legend()
    fig.tight_layout()
    return _finish(fig, path)


def plot_spectrogram(mel: np.ndarray, path: str | Path,
                     title: str = "log-mel") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3))
    im = ax.imshow(np.asarray(mel), origin="lower", aspect="auto",
                   cmap="magma")
    ax.set_xlabel("frame")
    ax.set_ylabel("mel band")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _finish(fig, path)


def plot_metric_bars(report, path: str | Path) -> Path:
    """Grouped baseline-vs-edited bars per operation for FD and KL."""
    ops = [op for op in ("add", "remove", "replace") if op in report.rows["edited"]]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    x = np.arange(len(ops))
    for ax, key in zip(axes, ("fd", "kl")):
        base = [report.rows["baseline"][op][key] for op in ops]
        edit = [report.rows["edited"][op][key] for op in ops]
        ax.bar(x - 0.2, base, width=0.4, label="baseline", color="gray")
        ax.bar(x + 0.2, edit, width=0.4, label="edited", color="seagreen")
        ax.set_xticks(x)
        ax.set_xticklabels(ops)
        ax.set_title(key.upper())
        ax.legend()
    fig.tight_layout()
    return _finish(fig, path)
