"""Static SVG charts and CSV summaries for reports and loss traces."""
from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp so the same inputs give the same bytes
matplotlib.rcParams["svg.hashsalt"] = "unimm"
matplotlib.rcParams["svg.fonttype"] = "none"

GROUP_ORDER = ("kinematic", "interactive", "map")


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def reports_bar_chart(reports: dict, path) -> None:
    """Grouped bars of meta and group scores; ``reports`` maps label -> report dict."""
    labels = list(reports)
    cols = ["meta"] + list(GROUP_ORDER)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    w = 0.8 / max(len(labels), 1)
    for i, lab in enumerate(labels):
        r = reports[lab]
        vals = [r["meta"]] + [r["group_scores"].get(g, 0.0) for g in GROUP_ORDER]
        ax.bar([c + i * w for c in range(len(cols))], vals, width=w, label=lab)
    ax.set_xticks([c + w * (len(labels) - 1) / 2 for c in range(len(cols))])
    ax.set_xticklabels(cols)
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def reports_csv(reports: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        feats = sorted({f for r in reports.values() for f in r["feature_scores"]})
        w.writerow(["label", "meta"] + list(GROUP_ORDER) + feats + ["min_ade"])
        for lab, r in reports.items():
            w.writerow([lab, r["meta"]] + [r["group_scores"].get(g, "") for g in GROUP_ORDER]
                       + [r["feature_scores"].get(f, "") for f in feats] + [r.get("min_ade", "")])


def trace_line_chart(traces: dict, path) -> None:
    """Loss against step for each trace; ``traces`` maps label -> list of (step, loss)."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for lab, rows in traces.items():
        ax.plot([r[0] for r in rows], [r[1] for r in rows], label=lab, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path)


def read_trace(path) -> list:
    with open(path) as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]
