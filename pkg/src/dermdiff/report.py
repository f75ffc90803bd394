"""Report emission: grouped metric tables (Markdown + CSV) and ROC plots (SVG).

Tables follow the A/B/C grouped-column layout with two-decimal numbers and
"--" for groups that are absent or undefined; the Markdown and CSV variants
are rendered from the same formatted strings so they can never disagree.
"""

from __future__ import annotations

import csv
from pathlib import Path
from xml.sax.saxutils import escape

from dermdiff import VERSION_STRING
from dermdiff.classify import GroupedReport
from dermdiff.metrics import FairnessReport

GROUP_ORDER = ("A", "B", "C")
METRIC_ORDER = ("accuracy", "f1", "auc")


def _fmt(value) -> str:
    return "--" if value is None else f"{value:.2f}"


def _grouped_cells(report: GroupedReport) -> dict:
    cells = {}
    for metric in METRIC_ORDER:
        for group in GROUP_ORDER:
            gm = report.groups.get(group)
            cells[(metric, group)] = _fmt(getattr(gm, metric) if gm else None)
    return cells


def emit_report(grouped: dict, fairness: dict, fid_rows: list, msssim_rows: list,
                out_dir, config_hash: str = "", tone_source: str = "oracle") -> dict:
    """Write report.md plus CSV tables; returns {name: path}.

    grouped: variant name -> GroupedReport; fairness: variant -> FairnessReport;
    fid_rows / msssim_rows: lists of already-formatted dict rows.
    """
    if not grouped and not fairness and not fid_rows and not msssim_rows:
        raise ValueError("nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}

    md = [f"# Evaluation report", "",
          f"- version: {VERSION_STRING}",
          f"- config_hash: {config_hash or 'n/a'}",
          f"- tone_source: {tone_source}", ""]

    if grouped:
        grouped_csv = out_dir / "grouped_metrics.csv"
        with open(grouped_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "task",
                             "accuracy_A", "accuracy_B", "accuracy_C",
                             "f1_A", "f1_B", "f1_C",
                             "auc_A", "auc_B", "auc_C"])
            md += ["## Grouped metrics", "",
                   "| Variant | Acc A | Acc B | Acc C | F1 A | F1 B | F1 C | AUC A | AUC B | AUC C |",
                   "|---|---|---|---|---|---|---|---|---|---|"]
            for variant in sorted(grouped):
                cells = _grouped_cells(grouped[variant])
                row = [cells[(m, g)] for m in METRIC_ORDER for g in GROUP_ORDER]
                writer.writerow([variant, grouped[variant].task] + row)
                md.append("| " + " | ".join([variant] + row) + " |")
            md.append("")
        paths["grouped"] = grouped_csv

    if fairness:
        fair_csv = out_dir / "fairness.csv"
        with open(fair_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "accuracy_parity_gap", "equal_opportunity_gap",
                             "equalized_odds_gap"])
            md += ["## Fairness gaps", "",
                   "| Variant | Accuracy parity | Equal opportunity | Equalized odds |",
                   "|---|---|---|---|"]
            for variant in sorted(fairness):
                rep = fairness[variant]
                row = [_fmt(rep.accuracy_parity_gap), _fmt(rep.equal_opportunity_gap),
                       _fmt(rep.equalized_odds_gap)]
                writer.writerow([variant] + row)
                md.append("| " + " | ".join([variant] + row) + " |")
            md.append("")
        paths["fairness"] = fair_csv

    if fid_rows:
        fid_csv = out_dir / "fid.csv"
        keys = list(fid_rows[0])
        with open(fid_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            md += ["## FID", "", "| " + " | ".join(keys) + " |",
                   "|" + "---|" * len(keys)]
            for row in fid_rows:
                values = [str(row[k]) for k in keys]
                writer.writerow(values)
                md.append("| " + " | ".join(values) + " |")
            md.append("")
        paths["fid"] = fid_csv

    if msssim_rows:
        ms_csv = out_dir / "msssim.csv"
        keys = list(msssim_rows[0])
        with open(ms_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            md += ["## MS-SSIM diversity", "", "| " + " | ".join(keys) + " |",
                   "|" + "---|" * len(keys)]
            for row in msssim_rows:
                values = [str(row[k]) for k in keys]
                writer.writerow(values)
                md.append("| " + " | ".join(values) + " |")
            md.append("")
        paths["msssim"] = ms_csv

    md_path = out_dir / "report.md"
    md_path.write_text("\n".join(md), encoding="utf-8")
    paths["markdown"] = md_path
    return paths


# ---------------------------------------------------------------------------
# ROC plot


def roc_points(y_true, scores) -> list[tuple[float, float]]:
    """Threshold sweep over distinct scores: (FPR, TPR) from (0,0) to (1,1)."""
    pairs = sorted(zip(scores, y_true), key=lambda p: -p[0])
    n_pos = sum(1 for _, y in pairs if y)
    n_neg = len(pairs) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(pairs):
        threshold = pairs[i][0]
        while i < len(pairs) and pairs[i][0] == threshold:
            if pairs[i][1]:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos))
    return points


def auc_trapezoid(points: list[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


_PALETTE = ("#1b6ca8", "#c03d3e", "#3a923a", "#8147b0", "#c77f1a", "#1f9e89",
            "#7a5141", "#d66ba0", "#5c5c5c")


def emit_roc_plot(logs_by_variant: dict, out_path) -> Path:
    """One ROC curve per tone group per variant, AUC in the legend, pure SVG.

    logs_by_variant: variant name -> prediction-log rows (dicts with group,
    true_label, score_malignant).  Degenerate groups (single class) are
    omitted with a legend note.
    """
    width, height = 560, 420
    left, top, plot = 60, 20, 320
    curves = []
    notes = []
    color_i = 0
    for variant in sorted(logs_by_variant):
        rows = logs_by_variant[variant]
        groups = sorted({r["group"] for r in rows if r["group"]})
        for group in groups:
            sub = [r for r in rows if r["group"] == group]
            y = [1 if r["true_label"] == "malignant" else 0 for r in sub]
            s = [float(r["score_malignant"]) for r in sub]
            label = f"{variant}/{group}"
            try:
                pts = roc_points(y, s)
            except ValueError:
                notes.append(f"{label}: omitted (single class)")
                continue
            curves.append((label, pts, auc_trapezoid(pts), _PALETTE[color_i % len(_PALETTE)]))
            color_i += 1

    def sx(x):
        return left + x * plot

    def sy(y):
        return top + plot - y * plot

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(0)}" stroke="black"/>',
        f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(0)}" y2="{sy(1)}" stroke="black"/>',
        f'<line x1="{sx(0)}" y1="{sy(0)}" x2="{sx(1)}" y2="{sy(1)}" stroke="#bbbbbb" '
        f'stroke-dasharray="6 4"/>',
    ]
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{sx(tick)}" y="{sy(0) + 16}" font-size="11" '
                     f'text-anchor="middle">{tick:g}</text>')
        parts.append(f'<text x="{sx(0) - 8}" y="{sy(tick) + 4}" font-size="11" '
                     f'text-anchor="end">{tick:g}</text>')
    parts.append(f'<text x="{sx(0.5)}" y="{sy(0) + 34}" font-size="12" '
                 f'text-anchor="middle">false positive rate</text>')
    parts.append(f'<text x="{left - 40}" y="{sy(0.5)}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 {left - 40} {sy(0.5)})">true positive rate</text>')
    for label, pts, auc, color in curves:
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.6"/>')
    legend_x = left + plot + 16
    y_at = top + 10
    for label, pts, auc, color in curves:
        parts.append(f'<line x1="{legend_x}" y1="{y_at - 4}" x2="{legend_x + 18}" y2="{y_at - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{legend_x + 24}" y="{y_at}" font-size="11">'
                     f"{escape(label)} AUC={auc:.2f}</text>")
        y_at += 16
    for note in notes:
        parts.append(f'<text x="{legend_x}" y="{y_at}" font-size="10" fill="#777777">'
                     f"{escape(note)}</text>")
        y_at += 14
    parts.append("</svg>")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(parts), encoding="utf-8")
    return out_path
