"""Matplotlib renderings of the report data (PNG files next to the
CSV/JSON exports). All figures are rendered headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_train_curves(log, path) -> None:
    """Loss (and, when present, sparsity trajectory) against step."""
    steps = [r["step"] for r in log.records]
    has_sparsity = bool(log.records) and "sparsity_loss" in log.records[0]
    ncols = 2 if has_sparsity else 1
    fig, axes = plt.subplots(1, ncols, figsize=(5.0 * ncols, 3.4), squeeze=False)
    ax = axes[0][0]
    ax.plot(steps, [r["lm_loss"] for r in log.records], label="lm loss", color="tab:blue")
    ax.set_xlabel("step")
    ax.set_ylabel("lm loss")
    ax.set_title(f"{log.stage} loss")
    if has_sparsity:
        ax2 = axes[0][1]
        ax2.plot(steps, [r["r"] for r in log.records], label="realized r", color="tab:orange")
        if log.summary.get("target_T") is not None:
            ax2.axhline(log.summary["target_T"], ls="--", color="gray", label="target T")
        ax2.set_xlabel("step")
        ax2.set_ylabel("sparsity r")
        ax2.set_ylim(-0.02, 1.02)
        ax2.legend(fontsize=8)
        ax2.set_title("sparsity trajectory")
    _save(fig, path)


def plot_trace_heatmap(matrix, path, title: str | None = None) -> None:
    """Module x token heatmap of a TraceMatrix."""
    vals = matrix.values
    fig, ax = plt.subplots(figsize=(max(5.0, vals.shape[1] * 0.12), max(3.2, vals.shape[0] * 0.22)))
    if matrix.kind == "cosine":
        im = ax.imshow(vals, aspect="auto", cmap="viridis", vmin=-1.0, vmax=1.0)
    else:
        im = ax.imshow(vals, aspect="auto", cmap="Greys", vmin=0.0, vmax=1.0)
    ax.set_yticks(range(len(matrix.row_labels)))
    ax.set_yticklabels(matrix.row_labels, fontsize=6)
    ax.set_xlabel("token position")
    ax.set_title(title or matrix.kind)
    fig.colorbar(im, ax=ax, fraction=0.03)
    _save(fig, path)


def plot_module_type_sparsity(report, path) -> None:
    """Attention vs MLP skip fractions, overall and per depth."""
    layers = [row["layer"] for row in report.per_depth]
    attn = [row["attention"] for row in report.per_depth]
    mlp = [row["mlp"] for row in report.per_depth]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9.0, 3.4))
    ax0.bar(["attention", "mlp"], [report.attention_sparsity, report.mlp_sparsity],
            color=["tab:blue", "tab:orange"])
    ax0.set_ylabel("skip fraction")
    ax0.set_ylim(0, 1)
    ax0.set_title(f"module-type sparsity (r={report.r:.3f})")
    ax1.plot(layers, attn, marker="o", label="attention")
    ax1.plot(layers, mlp, marker="s", label="mlp")
    ax1.set_xlabel("layer")
    ax1.set_ylabel("skip fraction")
    ax1.set_ylim(-0.02, 1.02)
    ax1.legend(fontsize=8)
    ax1.set_title("per-depth profile")
    _save(fig, path)


def plot_redundancy_shift(curves, path) -> None:
    """Execution ratios of attention vs MLP along the sequence."""
    starts = [c["start"] for c in curves]
    fig, ax = plt.subplots(figsize=(6.0, 3.4))
    ax.plot(starts, [c["attention_exec_ratio"] for c in curves], marker="o", label="attention")
    ax.plot(starts, [c["mlp_exec_ratio"] for c in curves], marker="s", label="mlp")
    ax.set_xlabel("window start (token position)")
    ax.set_ylabel("execution ratio")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(fontsize=8)
    ax.set_title("redundancy shift along the sequence")
    _save(fig, path)


def plot_sweep(result, path, dense_ppl: float | None = None) -> None:
    """Held-out perplexity against realized sparsity."""
    rs = [e.realized_r for e in result.entries]
    ppls = [e.ppl for e in result.entries]
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    ax.plot(rs, ppls, marker="o", color="tab:red", label="router-tuned")
    if dense_ppl is not None:
        ax.axhline(dense_ppl, ls="--", color="gray", label="dense")
    ax.set_xlabel("realized sparsity r")
    ax.set_ylabel("held-out perplexity")
    ax.set_title("perplexity vs sparsity")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_module_importance(redundancy: np.ndarray, labels: list[str], mask: np.ndarray, path) -> None:
    """Per-module mean redundancy, with dropped modules highlighted."""
    fig, ax = plt.subplots(figsize=(max(5.0, len(labels) * 0.4), 3.4))
    colors = ["tab:red" if m == 0 else "tab:blue" for m in mask]
    ax.bar(range(len(labels)), redundancy, color=colors)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=90, fontsize=6)
    ax.set_ylabel("mean input/output cosine")
    ax.set_title("module redundancy (red = dropped)")
    _save(fig, path)
