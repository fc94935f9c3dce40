"""Table-style report export: CSV and aligned markdown.

Rows follow the column order Forget AUC, Forget FPR, Retain-Acc, then
AUC/FPR per external set, then the averages. Values are percentages with
one decimal so that identical runs give byte-identical files.
"""
import csv
import io

LEAD = ("method", "scorer")


def pct(x):
    return f"{100.0 * float(x):.1f}"


def report_columns(ood_names):
    cols = list(LEAD) + ["forget_auc", "forget_fpr", "retain_acc"]
    for name in ood_names:
        cols += [f"{name}_auc", f"{name}_fpr"]
    return cols + ["avg_auc", "avg_fpr"]


def report_row(report):
    row = {"method": report.method, "scorer": report.scorer}
    row["forget_auc"] = pct(report.forget_auroc)
    row["forget_fpr"] = pct(report.forget_fpr95)
    row["retain_acc"] = pct(report.retain_acc)
    for name in sorted(report.ood):
        auc, fpr = report.ood[name]
        row[f"{name}_auc"] = pct(auc)
        row[f"{name}_fpr"] = pct(fpr)
    row["avg_auc"] = pct(report.avg_auroc)
    row["avg_fpr"] = pct(report.avg_fpr95)
    return row


def rows_to_csv(rows, columns):
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in columns})
    return out.getvalue()


def reports_to_csv(reports):
    """CSV text for a list of EvalReports sharing the same external sets."""
    if not reports:
        raise ValueError("no reports to export")
    names = sorted(reports[0].ood)
    if any(sorted(r.ood) != names for r in reports):
        raise ValueError("reports cover different external OOD sets")
    return rows_to_csv([report_row(r) for r in reports], report_columns(names))


def _header_label(col):
    fixed = {
        "method": "Method",
        "scorer": "Scorer",
        "forget_auc": "Forget AUC",
        "forget_fpr": "Forget FPR",
        "retain_acc": "Retain-Acc",
        "avg_auc": "AVG AUC",
        "avg_fpr": "AVG FPR",
    }
    if col in fixed:
        return fixed[col]
    name, _, kind = col.rpartition("_")
    return f"{name} {kind.upper()}"


def csv_to_markdown(text):
    """Render report CSV text as an aligned markdown table."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty CSV")
    header = [_header_label(c) for c in rows[0]]
    body = rows[1:]
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) if body else len(header[i]) for i in range(len(header))]
    numeric = [i >= len(LEAD) and rows[0][i] not in LEAD for i in range(len(header))]

    def fmt(cells):
        out = [c.rjust(w) if num else c.ljust(w) for c, w, num in zip(cells, widths, numeric)]
        return "| " + " | ".join(out) + " |"

    sep = ["-" * (w - 1) + ":" if num else "-" * w for w, num in zip(widths, numeric)]
    lines = [fmt(header), "| " + " | ".join(sep) + " |"] + [fmt(r) for r in body]
    return "\n".join(lines) + "\n"


def delta_rows(reports, baseline="Original"):
    """Per-metric difference (percentage points) of each report against the baseline row."""
    base = next((r for r in reports if r.method == baseline), None)
    if base is None:
        raise ValueError(f"no {baseline!r} row to compare against")
    out = []
    for r in reports:
        if r is base:
            continue
        out.append(
            {
                "method": r.method,
                "scorer": r.scorer,
                "d_forget_fpr": f"{100.0 * (r.forget_fpr95 - base.forget_fpr95):+.1f}",
                "d_retain_acc": f"{100.0 * (r.retain_acc - base.retain_acc):+.1f}",
                "d_avg_auc": f"{100.0 * (r.avg_auroc - base.avg_auroc):+.1f}",
            }
        )
    return out


DELTA_COLUMNS = ["method", "scorer", "d_forget_fpr", "d_retain_acc", "d_avg_auc"]

TRAJECTORY_COLUMNS = ["strategy", "after_task", "forget_set", "classes", "auroc", "fpr95"]


def trajectory_rows(strategy, steps, plan):
    rows = []
    for step in steps:
        for j, (auc, fpr) in sorted(step.history.items()):
            rows.append(
                {
                    "strategy": strategy,
                    "after_task": step.task_index + 1,
                    "forget_set": f"F{j + 1}",
                    "classes": " ".join(str(c) for c in sorted(plan[j])),
                    "auroc": pct(auc),
                    "fpr95": pct(fpr),
                }
            )
    return rows
