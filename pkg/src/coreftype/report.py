"""Report rendering: delimited tables plus matplotlib figures.

Every report path writes machine-readable output (JSON/TSV) next to a
PNG rendering of the same numbers, so runs can be skimmed without
loading anything.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import EvalReport
from .util import format_table


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves(log_rows, path) -> None:
    """Per-epoch pre-training losses as one figure."""
    epochs = [r["epoch"] for r in log_rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, label in [("entity_loss", "contrastive"), ("mlm_loss", "masked-token"),
                       ("total", "total"), ("val_loss", "validation")]:
        if any(key in r for r in log_rows):
            ax.plot(epochs, [r.get(key) for r in log_rows], label=label, linewidth=1.5)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    _finish(fig, path)


def save_per_label_recall(per_label, path, second=None, names=("model", "baseline")) -> None:
    """Horizontal bars of per-label recall; optionally two models side by side."""
    labels = sorted(per_label)
    y = range(len(labels))
    fig, ax = plt.subplots(figsize=(7, max(3, 0.28 * len(labels))))
    height = 0.38 if second is not None else 0.7
    ax.barh([i + (height / 2 if second is not None else 0) for i in y],
            [per_label[lab] for lab in labels], height=height, label=names[0])
    if second is not None:
        ax.barh([i - height / 2 for i in y],
                [second.get(lab, 0.0) for lab in labels], height=height, label=names[1])
        ax.legend(frameon=False)
    ax.set_yticks(list(y))
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_xlabel("recall of gold label")
    ax.set_xlim(0, 1)
    _finish(fig, path)


def save_depth_partition(depth, path) -> None:
    keys = [k for k in ("1", "2", "3+") if depth.get(k, {}).get("instances")]
    x = range(len(keys))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [depth[k]["macro_f1"] for k in keys],
           width=width, label="macro F1")
    ax.bar([i + width / 2 for i in x], [depth[k]["micro_f1"] for k in keys],
           width=width, label="micro F1")
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"depth {k}\n(n={depth[k]['instances']})" for k in keys])
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    _finish(fig, path)


def save_ablation_chart(rows, path) -> None:
    """Bars of micro F1 per ablation cell."""
    names = [r["cell"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(names)), 4))
    ax.bar(range(len(names)), [r["micro_f1"] for r in rows])
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("micro F1")
    ax.set_ylim(0, 1)
    _finish(fig, path)


def report_text(report: EvalReport) -> str:
    rows = [
        ("instances", report.instances),
        ("micro_f1", f"{report.micro_f1:.4f}"),
        ("macro_f1", f"{report.macro_f1:.4f}"),
    ]
    if report.strict_f1 is not None:
        rows.append(("strict_f1", f"{report.strict_f1:.4f}"))
    if report.lenient_f1 is not None:
        rows.append(("lenient_f1", f"{report.lenient_f1:.4f}"))
    parts = [format_table(["metric", "value"], rows)]
    if report.depth and any(v["instances"] for v in report.depth.values()):
        parts.append("")
        parts.append(format_table(
            ["depth", "instances", "macro_f1", "micro_f1"],
            [
                (k, v["instances"], f"{v['macro_f1']:.4f}", f"{v['micro_f1']:.4f}")
                for k, v in report.depth.items() if v["instances"]
            ],
        ))
    if report.per_label:
        parts.append("")
        parts.append(format_table(
            ["label", "recall"],
            [(lab, f"{r:.4f}") for lab, r in report.per_label.items()],
        ))
    return "\n".join(parts) + "\n"


def write_report(report: EvalReport, out_dir, figures: bool = True) -> None:
    """JSON + aligned text + TSV + figures for one evaluation."""
    from .util import dump_json

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_json(report.to_dict(), out_dir / "report.json")
    (out_dir / "report.txt").write_text(report_text(report), encoding="utf-8")
    if report.per_label:
        with (out_dir / "per_label_recall.tsv").open("w", encoding="utf-8") as f:
            f.write("label\trecall\n")
            for lab, r in report.per_label.items():
                f.write(f"{lab}\t{r:.6f}\n")
    if figures:
        if report.per_label:
            save_per_label_recall(report.per_label, out_dir / "per_label_recall.png")
        if report.depth and any(v["instances"] for v in report.depth.values()):
            save_depth_partition(report.depth, out_dir / "depth_partition.png")
