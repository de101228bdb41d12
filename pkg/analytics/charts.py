# analytics/charts.py
"""
DET curves and training-trace figures.
"""

import logging
from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from scipy.stats import norm  # noqa: E402

from ml.biometric_metrics import DetPoint  # noqa: E402

logger = logging.getLogger(__name__)

# DET axes run on the normal-deviate scale; rates are clipped away from 0 and 1
RATE_FLOOR = 1e-4
DET_TICKS = (0.001, 0.01, 0.05, 0.1, 0.2, 0.4)


def save_show(fig, path: Path, show: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=200)
    logger.info(f"Saved: {path}")
    if show:
        plt.show()
    plt.close(fig)
    return path


def _deviate(rates) -> np.ndarray:
    return norm.ppf(np.clip(np.asarray(rates, dtype=np.float64), RATE_FLOOR, 1.0 - RATE_FLOOR))


def chart_det(curves: Dict[str, Sequence[DetPoint]], path: Path, title: str = "DET") -> Path:
    """One DET line per named score set (APCER on x, BPCER on y)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, points in curves.items():
        ax.plot(_deviate([p.apcer for p in points]), _deviate([p.bpcer for p in points]), label=name)
    ticks = _deviate(DET_TICKS)
    ax.set_xticks(ticks)
    ax.set_yticks(ticks)
    ax.set_xticklabels([f"{t:g}" for t in DET_TICKS])
    ax.set_yticklabels([f"{t:g}" for t in DET_TICKS])
    ax.set_xlabel("APCER")
    ax.set_ylabel("BPCER")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="upper right", fontsize="small")
    return save_show(fig, path)


def chart_training_trace(trace: pd.DataFrame, path: Path, title: str = "Adversarial training") -> Path:
    """Loss and clean/robust accuracy per epoch, one line per model."""
    fig, (loss_ax, acc_ax) = plt.subplots(1, 2, figsize=(10, 4))
    groups = trace.groupby("model", sort=False) if "model" in trace.columns else [("model", trace)]
    for name, frame in groups:
        loss_ax.plot(frame["epoch"] + 1, frame["mean_loss"], label=name)
        if "clean_acc" in frame.columns:
            acc_ax.plot(frame["epoch"] + 1, frame["clean_acc"], label=f"{name} clean")
            acc_ax.plot(frame["epoch"] + 1, frame["robust_acc"], linestyle="--", label=f"{name} robust")
    loss_ax.set_xlabel("Epoch")
    loss_ax.set_ylabel("Mean loss")
    acc_ax.set_xlabel("Epoch")
    acc_ax.set_ylabel("Accuracy")
    acc_ax.set_ylim(0.0, 1.0)
    loss_ax.legend(fontsize="small")
    acc_ax.legend(fontsize="small")
    fig.suptitle(title)
    return save_show(fig, path)
