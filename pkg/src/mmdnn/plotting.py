"""Report figures, rendered headless to PNG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# no software/version stamp, so identical inputs give identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_horizon(horizon: list[dict], reference: dict | None, path) -> Path:
    """Detection rate of progressive scans by months to conversion, with the reference curve."""
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = [r for r in horizon if r["accuracy"] is not None]
    xs = range(len(rows))
    ax.plot(xs, [100 * r["accuracy"] for r in rows], "o-", label="synthetic cohort")
    for x, r in zip(xs, rows):
        ax.annotate(f"n={r['count']}", (x, 100 * r["accuracy"]), textcoords="offset points",
                    xytext=(0, 6), ha="center", fontsize=8)
    if reference:
        # the reference reports 1, 2 and 3 years before conversion
        pos = [i for i, r in enumerate(rows) if r["bucket"] in ("(0,12]", "(12,24]", "(24,36]")]
        if len(pos) == len(reference["accuracy"]):
            ax.plot(pos, reference["accuracy"], "s--", color="grey", label="real-cohort reference (not reproduced)")
    ax.set_xticks(list(xs), [r["bucket"] for r in rows])
    ax.set_xlabel("months to conversion")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 105)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_folds(fold_accuracy: list, member_accuracy: list[list], path) -> Path:
    """Per-fold ensemble test accuracy with each member's validation accuracy behind it."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, accs in enumerate(member_accuracy):
        ax.scatter([k] * len(accs), accs, s=10, color="lightgrey", zorder=1)
    ax.bar(range(len(fold_accuracy)), [a if a is not None else 0 for a in fold_accuracy],
           color="tab:blue", alpha=0.6, zorder=0, label="ensemble test accuracy")
    ax.scatter([], [], s=10, color="lightgrey", label="member validation accuracy")
    ax.set_xlabel("fold")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_xticks(range(len(fold_accuracy)))
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
