"""Figure rendering for the report paths.

Every CLI command that writes a delimited table or report also renders a
matplotlib figure next to it. The Agg backend keeps rendering headless.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import STRATA, MetricsReport  # noqa: E402

_DPI = 150


def plot_training_curves(history: list[dict], path) -> None:
    """Loss terms and validation recall per epoch."""
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key, label in (
        ("loss_total", "total"),
        ("loss_rank", "rank"),
        ("loss_base", "base"),
        ("loss_ib", "gate"),
        ("loss_freq", "band"),
    ):
        ax_loss.plot(epochs, [row[key] for row in history], label=label, linewidth=1.2)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=7)
    ax_metric.plot(epochs, [row["valid_recall20"] for row in history], color="tab:orange")
    ax_metric.set_xlabel("epoch")
    ax_metric.set_ylabel("valid Recall@20")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=_DPI)
    plt.close(fig)


def plot_sweep(rows: list[dict], path) -> None:
    """Validation recall across the calibration grid."""
    grid = [r for r in rows if r["setting"] != "conservative"]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(
        [r["lambda_b"] for r in grid],
        [r["valid_recall20"] for r in grid],
        marker="o",
        label="fixed strength",
    )
    control = [r for r in rows if r["setting"] == "conservative"]
    if control:
        ax.scatter(
            [r["lambda_b"] for r in control],
            [r["valid_recall20"] for r in control],
            marker="s",
            color="tab:red",
            label="conservative control",
        )
    ax.set_xlabel("residual strength")
    ax.set_ylabel("valid Recall@20")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=_DPI)
    plt.close(fig)


def plot_ablation(rows: list[dict], path) -> None:
    """Test recall per ablation variant."""
    names = [r["variant"] for r in rows]
    values = [r["test_recall20"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 0.5 * len(rows) + 1.5))
    ax.barh(range(len(rows)), values, color="tab:blue")
    ax.set_yticks(range(len(rows)), names, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("test Recall@20")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=_DPI)
    plt.close(fig)


def plot_band_diagnostics(diag: dict[str, float], num_bands: int, path) -> None:
    """Two-panel bar view: cross-view agreement and band-only recall."""
    labels = [f"band {m}" for m in range(1, num_bands + 1)]
    cosines = [diag[f"band{m}_cross_view_cosine"] for m in range(1, num_bands + 1)]
    recalls = [diag[f"band{m}_recall20"] for m in range(1, num_bands + 1)]
    fig, (ax_cos, ax_rec) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax_cos.bar(labels, cosines, color="steelblue")
    ax_cos.set_ylabel("cross-view cosine")
    ax_cos.set_ylim(0, 1.05)
    ax_rec.bar(labels, recalls, color="darkorange")
    ax_rec.set_ylabel("band-only Recall@20")
    fig.tight_layout()
    fig.savefig(Path(path), dpi=_DPI)
    plt.close(fig)


def plot_strata(report: MetricsReport, path) -> None:
    """Per-stratum recall with the head exposure share annotated."""
    values = [report.strata_recall20.get(name, 0.0) for name in STRATA]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([name.capitalize() for name in STRATA], values, color="seagreen")
    ax.set_ylabel("Recall@20")
    if report.head_exposure is not None:
        ax.set_title(f"head exposure = {report.head_exposure:.4f}", fontsize=9)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=_DPI)
    plt.close(fig)


def plot_eval_metrics(report: MetricsReport, title: str, path) -> None:
    """Recall/NDCG bars for one split."""
    labels, values = [], []
    for k in sorted(report.recall):
        labels.append(f"R@{k}")
        values.append(report.recall[k])
    for k in sorted(report.ndcg):
        labels.append(f"N@{k}")
        values.append(report.ndcg[k])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(labels, values, color="slategray")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(Path(path), dpi=_DPI)
    plt.close(fig)
