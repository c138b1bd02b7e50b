"""Figure rendering for report outputs.

Every report-producing command can drop a PNG next to its delimited output:
confusion heatmaps, training and translation loss curves, QA offset charts,
and the method comparison bars. All rendering is headless (Agg backend).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def confusion_figure(cm, path):
    """Heatmap of a ConfusionMatrix, rows ground truth."""
    n = len(cm.class_names)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 0.8 + 0.6 * n))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_xticks(range(n), cm.class_names, rotation=45, ha="right", fontsize=8)
    ax.set_yticks(range(n), cm.class_names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    vmax = cm.counts.max() if cm.counts.size else 1
    for i in range(n):
        for j in range(n):
            v = int(cm.counts[i, j])
            if v:
                ax.text(j, i, str(v), ha="center", va="center", fontsize=7,
                        color="white" if v > vmax / 2 else "black")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path)


def training_curves_figure(log_rows, path):
    """Loss plus train/validation accuracy per epoch."""
    epochs = [r["epoch"] for r in log_rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(epochs, [r["loss"] for r in log_rows], "o-", color="tab:red", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss", color="tab:red")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["train_acc"] for r in log_rows], "s-", color="tab:blue", label="train acc")
    val = [r["val_acc"] for r in log_rows]
    if not all(np.isnan(v) for v in val):
        ax2.plot(epochs, val, "^-", color="tab:green", label="val acc")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.02)
    fig.legend(loc="lower center", ncols=3, fontsize=8)
    return _save(fig, path)


def gan_curves_figure(log_rows, path):
    """Adversarial and cycle losses per epoch for one translator run."""
    epochs = [r["epoch"] for r in log_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.2))
    for key in ("adv_G", "adv_F", "adv_Dsrc", "adv_Dtgt"):
        ax1.plot(epochs, [r[key] for r in log_rows], label=key)
    ax1.set_xlabel("epoch")
    ax1.set_title("adversarial terms")
    ax1.legend(fontsize=7)
    ax2.plot(epochs, [r["cyc"] for r in log_rows], color="tab:purple")
    ax2.set_xlabel("epoch")
    ax2.set_title("cycle reconstruction L1")
    return _save(fig, path)


def comparison_figure(table, path):
    """Grouped bars: one panel per setting, one bar group per metric."""
    settings = table.settings
    fig, axes = plt.subplots(1, len(settings), figsize=(4.5 * len(settings), 3.2), squeeze=False)
    metrics = ("precision", "recall", "f1")
    for ax, setting in zip(axes[0], settings):
        group = [e for e in table.entries if e.setting == setting]
        x = np.arange(len(metrics))
        width = 0.8 / max(1, len(group))
        for gi, e in enumerate(group):
            vals = [e.report.weighted_precision, e.report.weighted_recall, e.report.weighted_f1]
            ax.bar(x + gi * width, vals, width, label=e.method)
        ax.set_xticks(x + width * (len(group) - 1) / 2, metrics)
        ax.set_ylim(0, 1.05)
        ax.set_title(setting)
        ax.legend(fontsize=8)
    return _save(fig, path)


def qa_figure(report, path):
    """Mean offset with dispersion whiskers per participant, threshold line."""
    names = [e.name for e in report.entries]
    means = [e.mean_offset_deg for e in report.entries]
    disp = [e.dispersion_deg for e in report.entries]
    colors = ["tab:green" if e.passed else "tab:red" for e in report.entries]
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * len(names)), 3.2))
    ax.bar(names, means, yerr=disp, color=colors, capsize=3)
    ax.axhline(report.threshold_deg, color="black", linestyle="--", linewidth=1,
               label=f"threshold {report.threshold_deg:g} deg")
    ax.set_ylabel("gaze offset to target (deg)")
    ax.tick_params(axis="x", rotation=45, labelsize=8)
    ax.legend(fontsize=8)
    return _save(fig, path)
