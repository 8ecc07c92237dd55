"""SVG charts for evaluation breakdowns and drift tables."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import METRIC_LABELS, DriftTable  # noqa: E402

plt.rcParams["svg.hashsalt"] = "nilmbench"  # stable element ids across runs


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def active_count_chart(breakdown, names, path, metric="mae"):
    """Grouped bars: metric per appliance for each number of loads ON."""
    ks = sorted(breakdown)
    width = 0.8 / max(len(names), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(ks))
    for j, name in enumerate(names):
        vals = [breakdown[k].report.values[metric][j] for k in ks]
        ax.bar(x + (j - (len(names) - 1) / 2) * width, vals, width, label=name)
    labels = [f"{k}\n(n={breakdown[k].n_samples}{'*' if breakdown[k].low_confidence else ''})" for k in ks]
    ax.set_xticks(x, labels)
    ax.set_xlabel("appliances ON")
    ax.set_ylabel(METRIC_LABELS[metric])
    ax.legend(fontsize="small")
    return _save(fig, path)


def state_chart(state_breakdown, path, metric="mae"):
    """ON vs OFF error per appliance."""
    names = list(state_breakdown)
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 4))
    for off, label in ((-0.2, "on"), (0.2, "off")):
        vals = [getattr(state_breakdown[n][label], metric) if label in state_breakdown[n] else np.nan
                for n in names]
        ax.bar(x + off, vals, 0.4, label=label.upper())
    ax.set_xticks(x, names)
    ax.set_ylabel(METRIC_LABELS.get(metric, metric))
    ax.legend(fontsize="small")
    return _save(fig, path)


def drift_chart(table: DriftTable, path):
    """Before/after average per metric."""
    rows = [r for r in table.rows if r[1] == ("Avg" if len(table.appliances) > 1 else table.appliances[0])]
    labels = [METRIC_LABELS[r[0]] for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, [r[2] for r in rows], 0.4, label="before")
    ax.bar(x + 0.2, [r[3] for r in rows], 0.4, label="after")
    ax.set_xticks(x, labels)
    ax.set_yscale("symlog", linthresh=1.0)
    ax.legend(fontsize="small")
    return _save(fig, path)
