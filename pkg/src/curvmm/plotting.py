"""Figure rendering for the command-line report paths.

Every function writes a PNG next to the delimited output and returns the
path. The Agg backend is forced so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "save_trace_plot",
    "save_training_curves",
    "save_metrics_plot",
    "save_audit_histogram",
]

_DPI = 120


def save_trace_plot(trace, path):
    """Objective decomposition and gradient norm across solver iterations.

    ``trace`` is a solver trace or its dict form.
    """
    data = trace if isinstance(trace, dict) else trace.to_dict()
    total = data["objectives"]
    iters = np.arange(len(total))
    fig, (ax_obj, ax_grad) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax_obj.plot(iters, total, marker="o", label="objective")
    ax_obj.plot(iters, data["fidelity"], marker=".", label="fidelity")
    ax_obj.plot(iters, data["regularizer"], marker=".", label="regularizer")
    ax_obj.set_ylabel("value")
    ax_obj.set_title(f"solve trace ({data.get('mode', 'unknown')} mode)")
    ax_obj.legend()
    grads = data.get("gradient_norms") or []
    if grads:
        ax_grad.semilogy(np.arange(len(grads)), grads, marker="o",
                         label="gradient norm")
    his = data.get("nu_his") or []
    if his:
        ax_grad.semilogy(np.arange(len(his)), his, marker=".",
                         label="step-size ceiling")
    ax_grad.set_xlabel("iteration")
    ax_grad.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_training_curves(history, path):
    """Train and validation loss per epoch from the training history."""
    epochs = [h["epoch"] for h in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    train = [h.get("train_loss") for h in history]
    if any(v is not None for v in train):
        ax.plot(epochs, train, marker=".", label="train loss")
    ax.plot(epochs, [h["val_loss"] for h in history], marker="o",
            label="validation loss")
    best = [h for h in history if h.get("best")]
    if best:
        ax.axvline(best[-1]["epoch"], color="gray", linestyle=":",
                   label=f"best epoch {best[-1]['epoch']}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title("training curves")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_metrics_plot(report, path):
    """Histograms of the per-sample scores."""
    rows = report.per_sample if hasattr(report, "per_sample") \
        else report["per_sample"]
    keys = ("le", "auc", "nmse", "psnr_db", "te")
    fig, axes = plt.subplots(2, 3, figsize=(11, 6))
    for ax, key in zip(axes.flat, keys):
        vals = [r[key] for r in rows if r[key] is not None]
        if vals:
            ax.hist(vals, bins=min(20, max(5, len(vals) // 4)))
        ax.set_title(key)
    axes.flat[-1].axis("off")
    fig.suptitle(f"reconstruction metrics over {len(rows)} samples")
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_audit_histogram(audit, path):
    """Curvature tightness histogram from an audit report dict."""
    hist = audit["histogram"]
    edges = np.asarray(hist["bin_edges"])
    counts = np.asarray(hist["counts"])
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge",
           edgecolor="black")
    ax.set_xlabel("spectral / analytic curvature ratio")
    ax.set_ylabel("points")
    ax.set_title(
        "curvature tightness "
        f"(majorization pass rate {audit['majorization_pass_rate']:.3f})"
    )
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path
