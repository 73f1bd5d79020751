"""PNG figures written next to the CSV reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_forecast(times, observed, forecasts: dict[str, np.ndarray], path, title: str = "", hours: int = 168) -> Path:
    """Observed AP against each model's forecast over the first ``hours`` test points."""
    path = Path(path)
    n = min(hours, len(observed))
    fig, ax = plt.subplots(figsize=(10, 3.6))
    t = np.asarray(times[:n]).astype("datetime64[h]").astype(object)
    ax.plot(t, np.asarray(observed)[:n], color="black", lw=1.6, label="Observed")
    for name, pred in forecasts.items():
        ax.plot(t, np.asarray(pred)[:n], lw=1.0, label=name)
    ax.set_ylabel("Active power (kW)")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8, ncol=len(forecasts) + 1)
    fig.autofmt_xdate()
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_losses(histories: dict, path, title: str = "") -> Path:
    """Train and validation MSE per epoch (log scale) for several runs."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6.4, 4))
    for i, (name, h) in enumerate(histories.items()):
        if not len(h):
            continue
        epochs = np.arange(1, len(h) + 1)
        color = f"C{i}"
        ax.plot(epochs, h.train_loss, color=color, lw=1.0, ls="--", label=f"{name} train")
        ax.plot(epochs, h.val_loss, color=color, lw=1.4, label=f"{name} val")
    ax.set_yscale("log")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("MSE (normalized)")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
