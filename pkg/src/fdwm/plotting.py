"""Static PNG figures for the CLI reports (headless Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_heatmap(t: np.ndarray, path, rho: float | None = None, title: str = "Fourier heat map"):
    """Error per centered frequency; the sensitive set is outlined when ``rho`` is given."""
    h, w = t.shape
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    extent = (-(w // 2) - 0.5, w - w // 2 - 0.5, h - h // 2 - 0.5, -(h // 2) - 0.5)
    im = ax.imshow(t, cmap="viridis", vmin=0.0, vmax=max(float(np.nanmax(t)), 1e-9),
                   extent=extent, interpolation="nearest")
    if rho is not None:
        ax.contour(np.arange(w) - w // 2, np.arange(h) - h // 2, (t >= rho).astype(float),
                   levels=[0.5], colors="w", linewidths=0.8)
    ax.set_xlabel("horizontal frequency")
    ax.set_ylabel("vertical frequency")
    ax.set_title(title if rho is None else f"{title} (rho={rho:g})")
    fig.colorbar(im, ax=ax, label="top-1 error")
    return _save(fig, path)


def plot_mask(mask: np.ndarray, path, title: str = "clustering map"):
    h, w = mask.shape
    fig, ax = plt.subplots(figsize=(3.6, 3.6))
    extent = (-(w // 2) - 0.5, w - w // 2 - 0.5, h - h // 2 - 0.5, -(h // 2) - 0.5)
    ax.imshow(mask, cmap="gray_r", vmin=0, vmax=1, extent=extent, interpolation="nearest")
    ax.set_xlabel("horizontal frequency")
    ax.set_ylabel("vertical frequency")
    ax.set_title(f"{title} ({int(mask.sum())} positions)")
    return _save(fig, path)


def plot_triggers(sources: np.ndarray, triggers: np.ndarray, path, count: int = 6):
    """Top row sources, middle row triggers, bottom row amplified difference."""
    count = min(count, len(sources))
    fig, axes = plt.subplots(3, count, figsize=(1.4 * count, 4.4), squeeze=False)
    diff = triggers[:count] - sources[:count]
    span = max(float(np.abs(diff).max()), 1e-12)
    for k in range(count):
        for row, img, kw in ((0, sources[k], {"vmin": 0, "vmax": 1}),
                             (1, triggers[k], {"vmin": 0, "vmax": 1}),
                             (2, diff[k], {"vmin": -span, "vmax": span})):
            shown = img[..., 0] if img.shape[-1] == 1 else np.clip(img, 0, 1)
            ax = axes[row, k]
            ax.imshow(shown, cmap="gray" if row < 2 else "RdBu", **kw)
            ax.set_xticks([])
            ax.set_yticks([])
    axes[0, 0].set_ylabel("source")
    axes[1, 0].set_ylabel("trigger")
    axes[2, 0].set_ylabel("difference")
    return _save(fig, path)


def plot_robustness(rows: list[dict], path, title: str = "robustness"):
    """Grouped bars of clean and trigger accuracy per attack row."""
    labels = [r["attack"] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(rows) + 1.5), 3.4))
    ax.bar(x - 0.2, [r.get("acc_o", np.nan) for r in rows], 0.4, label="clean accuracy")
    ax.bar(x + 0.2, [r.get("acc_w", np.nan) for r in rows], 0.4, label="trigger accuracy")
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=35, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    ax.legend(fontsize=8, loc="lower left")
    return _save(fig, path)


def plot_history(history: list[dict], path, title: str = "training"):
    epochs = [r["epoch"] for r in history]
    fig, ax = plt.subplots(figsize=(4.2, 3.0))
    ax.plot(epochs, [r["train_loss"] for r in history], label="train loss")
    if history and "val_acc" in history[0]:
        ax2 = ax.twinx()
        ax2.plot(epochs, [r["val_acc"] for r in history], color="C1", label="val accuracy")
        ax2.set_ylim(0, 1.05)
        ax2.set_ylabel("val accuracy")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return _save(fig, path)
