"""Figure rendering for run reports.

Each report path drops a PNG next to its delimited output: accuracy
versus budget for evaluations, learning curves for training runs, and an
overlay for run comparisons.  Rendering is headless (Agg).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_RC = {
    "figure.figsize": (5.0, 3.4),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "savefig.bbox": "tight",
}


def _style():
    return plt.rc_context(_RC)


def save_eval_figure(report, path) -> None:
    """Accuracy vs perturbation budget for one evaluation report."""
    with _style():
        fig, ax = plt.subplots()
        ax.plot(report.eps_grid, report.accuracies, marker="o")
        ax.set_xlabel("perturbation budget (pixel units)")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.set_title(f"robustness sweep ({report.split}, n={report.subset}, RD={report.rd:.3f})")
        fig.savefig(path)
        plt.close(fig)


def save_learning_curves(rows, eps_grid, path, title: str = "") -> None:
    """Train/test accuracy plus the mean adaptive budget, per evaluated epoch."""
    epochs = [r["epoch"] for r in rows]
    with _style():
        fig, ax = plt.subplots()
        ax.plot(epochs, [r["train_acc_adv"] for r in rows], label="train acc (attacked)")
        ax.plot(epochs, [r["train_acc_clean"] for r in rows], label="train acc (clean)")
        ax.plot(epochs, [r["test_nat_acc"] for r in rows], label="test acc (natural)")
        robust_cols = [c for c in rows[0] if c.startswith("robust_acc@")]
        if robust_cols:
            mid = robust_cols[len(robust_cols) // 2]
            ax.plot(epochs, [r[mid] for r in rows], label=f"test acc ({mid.split('@')[1]})")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax2 = ax.twinx()
        ax2.plot(epochs, [r["mean_eps"] for r in rows], color="gray",
                 linestyle="--", label="mean budget")
        ax2.set_ylabel("mean per-example budget")
        ax2.grid(False)
        if title:
            ax.set_title(title)
        handles, labels = ax.get_legend_handles_labels()
        h2, l2 = ax2.get_legend_handles_labels()
        ax.legend(handles + h2, labels + l2, loc="lower right")
        fig.savefig(path)
        plt.close(fig)


def save_compare_figure(named_points: dict[str, tuple[list, list]], path) -> None:
    """Overlayed accuracy-vs-budget curves, one per run."""
    with _style():
        fig, ax = plt.subplots()
        for name, (grid, accs) in named_points.items():
            ax.plot(grid, accs, marker="o", label=name)
        ax.set_xlabel("perturbation budget (pixel units)")
        ax.set_ylabel("accuracy")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.savefig(path)
        plt.close(fig)
