"""Markdown reports with matplotlib figures rendered next to the metrics."""

from __future__ import annotations

import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import scan_metrics_dir

LOSS_FIGURE = "loss_curves.png"
PROBE_FIGURE = "probe_accuracy.png"
REPORT_NAME = "report.md"


def markdown_table(headers: list[str], rows: list[list]) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(headers) + " |", "| " + " | ".join("---" for _ in headers) + " |"]
    lines += ["| " + " | ".join(fmt(v) for v in row) + " |" for row in rows]
    return "\n".join(lines)


def render_loss_figure(train_records: list[dict], path: str) -> None:
    series = defaultdict(list)
    for rec in train_records:
        for key, val in rec.items():
            if isinstance(val, (int, float)) and key not in ("step", "kind"):
                series[key].append((rec.get("step", len(series[key])), val))
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in sorted(series):
        pts = series[key]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_probe_figure(probe_records: list[dict], path: str) -> None:
    labels = [
        f"{r.get('branch', '?')}/{r.get('target', '?')}@{r.get('fraction', '?')}"
        for r in probe_records
    ]
    values = [r.get("accuracy", 0.0) for r in probe_records]
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(labels) + 2), 3.5))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_report(metrics_dir: str, out_dir: str | None = None) -> str:
    """Summarize every metrics file in a directory into report.md + figures."""
    out_dir = metrics_dir if out_dir is None else out_dir
    os.makedirs(out_dir, exist_ok=True)
    records = scan_metrics_dir(metrics_dir)
    train = [r for r in records if r.get("kind") == "train"]
    probes = [r for r in records if r.get("kind") == "probe"]
    ablations = [r for r in records if r.get("kind") == "ablate"]

    sections = ["# Run report", ""]
    sections.append(f"Records: {len(train)} train, {len(probes)} probe, {len(ablations)} ablation.")
    sections.append("")

    if train:
        render_loss_figure(train, os.path.join(out_dir, LOSS_FIGURE))
        last = train[-1]
        loss_keys = sorted(
            k for k, v in last.items() if isinstance(v, (int, float)) and k not in ("step",)
        )
        sections.append("## Training")
        sections.append("")
        sections.append(markdown_table(["loss", "final value"], [[k, float(last[k])] for k in loss_keys]))
        sections.append("")
        sections.append(f"![loss curves]({LOSS_FIGURE})")
        sections.append("")

    if probes:
        render_probe_figure(probes, os.path.join(out_dir, PROBE_FIGURE))
        sections.append("## Probes")
        sections.append("")
        rows = [
            [
                r.get("branch", "?"),
                r.get("target", "?"),
                r.get("fraction", "?"),
                float(r.get("accuracy", 0.0)),
                float(r.get("macro_f1", 0.0)),
            ]
            for r in probes
        ]
        sections.append(markdown_table(["branch", "target", "fraction", "accuracy", "macro-F1"], rows))
        sections.append("")
        sections.append(f"![probe accuracy]({PROBE_FIGURE})")
        sections.append("")

    if ablations:
        sections.append("## Ablations")
        sections.append("")
        rows = [
            [r.get("variant", "?"), float(r.get("accuracy", 0.0)), float(r.get("macro_f1", 0.0))]
            for r in ablations
        ]
        sections.append(markdown_table(["variant", "style-probe accuracy", "macro-F1"], rows))
        sections.append("")

    report_path = os.path.join(out_dir, REPORT_NAME)
    with open(report_path, "w") as fh:
        fh.write("\n".join(sections))
    return report_path
