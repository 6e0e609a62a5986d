"""PNG figures written next to the CSV outputs.

The Agg backend is forced and PNG metadata is stripped so identical inputs
give byte-identical files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def loss_curve(path, epoch_losses, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = np.arange(1, len(epoch_losses) + 1)
    ax.plot(epochs, epoch_losses, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def ablation_bars(path, names, miou, texture_fp, reference=None) -> None:
    """Synthetic mIoU and texture FP per variant; optional reference mIoU on a second axis."""
    x = np.arange(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.6))
    ax1.bar(x, 100 * np.asarray(miou), color="tab:blue", label="synthetic mIoU (%)")
    if reference is not None:
        ref_ax = ax1.twinx()
        ref_ax.plot(x, reference, "k--o", ms=4, label="reference mIoU (%)")
        ref_ax.set_ylabel("reference mIoU (%)")
        ref_ax.legend(loc="upper right", fontsize=7)
    ax1.set_ylabel("synthetic mIoU (%)")
    ax1.legend(loc="upper left", fontsize=7)
    ax2.bar(x, texture_fp, color="tab:red")
    ax2.set_ylabel("FP on co-occurring texture")
    for ax in (ax1, ax2):
        ax.set_xticks(x)
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def sweep_lines(path, param: str, values, miou, fp, fn, default=None) -> None:
    values = np.asarray(values, dtype=float)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(values, 100 * np.asarray(miou), marker="o")
    ax1.set_ylabel("mIoU (%)")
    ax2.plot(values, fp, marker="o", label="FP")
    ax2.plot(values, fn, marker="s", label="FN")
    ax2.legend(fontsize=8)
    for ax in (ax1, ax2):
        ax.set_xlabel(param)
        ax.grid(alpha=0.3)
        if default is not None:
            ax.axvline(float(default), color="gray", ls=":", lw=1)
    fig.tight_layout()
    _save(fig, path)
