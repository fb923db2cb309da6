"""t-score figures written next to the CSV reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_tscores(series: dict, path, threshold: float = 4.5, windows=(), title: str = "") -> None:
    """One panel per t-score series, threshold lines dashed, excluded windows shaded."""
    fig, axes = plt.subplots(len(series), 1, figsize=(9, 2.8 * len(series)), squeeze=False, sharex=True)
    for ax, (label, t) in zip(axes[:, 0], series.items()):
        x = np.arange(len(t))
        for lo, hi in windows:
            ax.axvspan(lo - 0.5, hi + 0.5, color="0.85", lw=0)
        ax.plot(x, t, lw=0.6, color="tab:blue")
        for s in (threshold, -threshold):
            ax.axhline(s, color="tab:red", ls="--", lw=0.8)
        ax.set_ylabel(label)
    axes[-1, 0].set_xlabel("sample (clock cycle)")
    if title:
        axes[0, 0].set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
