"""Report figures written to files (Agg backend, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    # stable bytes across runs
    "svg.hashsalt": "nowcast",
}

METRICS = ("f1", "csi", "hss", "mcc")


def figsize(scale=1.0, ratio=0.62):
    width = 6.5 * scale
    return width, width * ratio


def save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def score_bars(reports, threshold, path):
    """Grouped bars: one group per metric, one bar per model, at a single threshold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        n = len(reports)
        width = 0.8 / max(n, 1)
        x = np.arange(len(METRICS))
        for i, rep in enumerate(reports):
            s = rep.scores[float(threshold)]
            ax.bar(x + (i - (n - 1) / 2) * width, [s[m] for m in METRICS], width, label=rep.model)
        ax.set_xticks(x, [m.upper() for m in METRICS])
        ax.set_ylabel("score")
        ax.set_title(f"threshold > {threshold:g} mm/h")
        ax.axhline(0, color="0.3", lw=0.6)
        ax.legend(frameon=False, ncol=min(n, 4))
        return save(fig, path)


def prediction_panels(last_input, target, predictions, path, titles=None, vmax=None):
    """One row per sample: last input frame, target, then each model's prediction (mm/h)."""
    last_input = np.atleast_3d(last_input)
    rows = len(target)
    cols = 2 + len(predictions)
    vmax = vmax or max(float(np.max(target)), 1e-6)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows), squeeze=False)
        names = ["last input", "target", *predictions.keys()]
        for r in range(rows):
            panels = [last_input[r], target[r], *(p[r] for p in predictions.values())]
            for c, img in enumerate(panels):
                ax = axes[r, c]
                im = ax.imshow(np.squeeze(img), cmap="Blues", vmin=0, vmax=vmax)
                ax.set_xticks([])
                ax.set_yticks([])
                if r == 0:
                    ax.set_title(names[c])
                if c == 0 and titles:
                    ax.set_ylabel(titles[r])
        fig.colorbar(im, ax=axes, shrink=0.6, label="mm/h")
        return save(fig, path)


def ablation_bars(rows, model, path):
    """Horizontal bars of the F1 drop per removed variable."""
    rows = [r for r in rows if r.variable is not None]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(0.8))
        ax.barh([r.variable for r in rows][::-1], [r.delta_f1 for r in rows][::-1], color="tab:blue")
        ax.set_xlabel("F1 drop when removed")
        ax.set_title(model)
        return save(fig, path)


def training_curves(histories, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        for name, hist in histories.items():
            ep = [h["epoch"] for h in hist]
            ax.plot(ep, [h["train_loss"] for h in hist], label=f"{name} train")
            ax.plot(ep, [h["val_loss"] for h in hist], ls="--", label=f"{name} val")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE (normalized)")
        ax.legend(frameon=False)
        return save(fig, path)
