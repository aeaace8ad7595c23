"""Byte-stable SVG figures of predictive distributions."""

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SVG_SALT = "mtnp"


def _stable_svg(fig, path, description: Optional[str]):
    meta = {"Date": None, "Creator": None}
    if description:
        meta["Description"] = description
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata=meta)
    plt.close(fig)


def plot_function(path, x: np.ndarray, truth: np.ndarray, mean: np.ndarray, std: np.ndarray,
                  ctx_x: Sequence[np.ndarray], ctx_y: Sequence[np.ndarray], task_names: Sequence[str],
                  title: str = "", description: Optional[str] = None) -> Path:
    """One panel per task: ground truth, predictive mean with a one-std band, context markers.

    ``truth``/``mean``/``std`` have shape ``(N, T)``; ``ctx_x[t]``/``ctx_y[t]``
    are the observed context points of task ``t``.
    """
    T = len(task_names)
    order = np.argsort(x)
    fig, axes = plt.subplots(1, T, figsize=(3.2 * T, 2.6), squeeze=False)
    for t, ax in enumerate(axes[0]):
        xs = x[order]
        ax.plot(xs, truth[order, t], color="0.3", lw=1.0, ls="--", label="truth")
        ax.plot(xs, mean[order, t], color="C0", lw=1.2, label="mean")
        ax.fill_between(xs, mean[order, t] - std[order, t], mean[order, t] + std[order, t],
                        color="C0", alpha=0.25, lw=0)
        ax.scatter(ctx_x[t], ctx_y[t], s=14, color="C3", zorder=3, label="context")
        ax.set_title(task_names[t], fontsize=9)
        ax.tick_params(labelsize=7)
    axes[0][0].legend(fontsize=6, loc="best")
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _stable_svg(fig, path, description)
    return path
