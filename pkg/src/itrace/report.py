"""Report figures rendered next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .engine import RunResult


def save_report_figure(res: RunResult, path) -> Path:
    """Field magnitude and path-count figure for a run, written to path."""
    path = Path(path)
    mags = res.magnitude
    db = np.where(mags > 0, 20.0 * np.log10(np.where(mags > 0, mags, 1.0) / 1e-6), np.nan)
    idx = np.arange(len(mags))

    fig, (ax1, ax2) = plt.subplots(
        2, 1, figsize=(9, 6), sharex=True, gridspec_kw={"height_ratios": [3, 1]}
    )
    ax1.plot(idx, db, lw=0.9, color="tab:blue")
    ax1.set_ylabel(r"|E|  [dB$\mu$V/m]")
    ax1.grid(True, alpha=0.3)
    ax1.set_title("Field magnitude per observation point")

    ax2.bar(idx, res.path_count, width=1.0, color="tab:gray")
    ax2.set_ylabel("paths")
    ax2.set_xlabel("observation point index")
    ax2.grid(True, alpha=0.3)

    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
