"""Evaluate the shipped three-class fixture and inspect its curves.

Reads ``data/eval3`` relative to the repository root.
"""

from pathlib import Path

from backbone_lens.metrics import (
    eval_report,
    format_report_table,
    read_class_names,
    read_detections_csv,
    read_ground_truth_csv,
)

DATA = Path(__file__).resolve().parents[1] / "data" / "eval3"

names = read_class_names(DATA / "names.txt")
dets = read_detections_csv(DATA / "dets.csv")
gts = read_ground_truth_csv(DATA / "gts.csv")

report = eval_report(dets, gts, names, iou_threshold=0.5, conf_threshold=0.25)
print(format_report_table(report))

# AP integrates the monotone envelope over every detection, while the table's
# precision and recall only count detections above the confidence threshold.
for name, curve in report.pr_curves.items():
    pts = ", ".join(f"({r:.3f}, {p:.3f})" for r, p in curve)
    print(f"{name:<11} {pts or '(no detections)'}")

labels = list(names) + ["background"]
print("\nconfusion (rows ground truth, columns prediction):")
print(" " * 11 + "".join(f"{l[:10]:>11}" for l in labels))
for label, row in zip(labels, report.confusion):
    print(f"{label[:10]:<11}" + "".join(f"{v:>11d}" for v in row))
