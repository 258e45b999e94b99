"""Report figures (PNG) rendered off-screen with matplotlib."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def rmse_bars(report, path):
    """Mean test RMSE per model, with the seed spread as error bars."""
    groups = report.by_model()
    names = list(groups)
    means = [np.mean([r.rmse for r in groups[n]]) for n in names]
    spread = [np.std([r.rmse for r in groups[n]]) for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(names, means, yerr=spread, color="#4c72b0", capsize=3)
        ax.set_ylabel("test RMSE")
        ax.set_title(report.name)
        ax.tick_params(axis="x", rotation=20)
        _save(fig, path)


def step_curves(report, path):
    """Per-step RMSE of multi-step rollouts, averaged over seeds."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, rows in report.by_model().items():
            curves = [r.per_step_rmse for r in rows if r.per_step_rmse]
            if not curves:
                continue
            mean = np.mean(curves, axis=0)
            ax.plot(np.arange(1, len(mean) + 1), mean, marker="o", label=name)
        ax.set_xlabel("steps ahead")
        ax.set_ylabel("RMSE")
        ax.legend()
        _save(fig, path)


def weight_maps(maps: dict, path, threshold: float | None = None):
    """|weight| of each fusion component and channel, one panel each."""
    panels = [(f"{name} ch{c}", np.abs(w[c])) for name, w in maps.items() for c in range(w.shape[0])]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(2.2 * len(panels), 2.4), squeeze=False)
        for ax, (title, m) in zip(axes[0], panels):
            im = ax.imshow(m, cmap="RdYlGn_r", origin="upper")
            if threshold is not None:
                ax.contour(m, levels=[threshold], colors="k", linewidths=0.6)
            ax.set_title(title)
            ax.set_xticks([])
            ax.set_yticks([])
            ax.grid(False)
            fig.colorbar(im, ax=ax, fraction=0.046)
        _save(fig, path)


def history(records, path):
    """Training loss and validation RMSE per epoch."""
    epochs = [r.epoch for r in records]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(epochs, [r.train_loss for r in records], label="train loss (normalized MSE)")
        ax.set_xlabel("epoch")
        ax.set_yscale("log")
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.val_rmse for r in records], color="#dd8452", label="validation RMSE")
        ax2.grid(False)
        fig.legend(loc="upper right")
        _save(fig, path)
