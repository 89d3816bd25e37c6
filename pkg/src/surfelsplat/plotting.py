"""Report figures: per-loss training curves and the conditioning-noise sweep."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import LOSS_NAMES  # noqa: E402

STAGE_COLORS = {1: "#1f77b4", 2: "#d62728"}


def _smooth(y, window):
    if window <= 1 or len(y) < window:
        return np.asarray(y, dtype=float)
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def plot_loss_curves(log, path, window: int = 50) -> Path:
    """One panel per loss term plus the weighted total, log-scaled, coloured by stage.

    ``log`` is the list of row dicts produced by the fitting loop (or read
    back from ``loss_log.csv``). Curves are running means over ``window``
    iterations.
    """
    path = Path(path)
    names = list(LOSS_NAMES) + ["total"]
    fig, axes = plt.subplots(2, 3, figsize=(11, 6), sharex=True)
    for ax, name in zip(axes.flat, names):
        for stage in (1, 2):
            rows = [r for r in log if r["stage"] == stage]
            if not rows:
                continue
            it = np.array([r["iteration"] for r in rows])
            y = _smooth([max(r[name], 1e-12) for r in rows], window)
            ax.plot(it[len(it) - len(y):], y, color=STAGE_COLORS[stage], lw=1.2, label=f"stage {stage}")
        ax.set_title(name)
        ax.set_yscale("log")
        ax.grid(alpha=0.3, which="both")
    for ax in axes[-1]:
        ax.set_xlabel("iteration")
    axes.flat[0].legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_noise_ablation(table, path) -> Path:
    """PSNR and SSIM against the conditioning-noise std.

    ``table`` rows carry ``std``, ``psnr`` and ``ssim`` (seed means) and
    optionally ``psnr_sd`` for error bars.
    """
    path = Path(path)
    std = np.array([r["std"] for r in table])
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(8, 3.2))
    a1.errorbar(std, [r["psnr"] for r in table], yerr=[r.get("psnr_sd", 0.0) for r in table],
                marker="o", capsize=3, color="#1f77b4")
    a1.set_ylabel("PSNR (dB)")
    a2.plot(std, [r["ssim"] for r in table], marker="s", color="#2ca02c")
    a2.set_ylabel("SSIM")
    for ax in (a1, a2):
        ax.set_xlabel("pose noise std")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
