"""Detection evaluation: IoU matching, P/R/F1, PR curves, AP, mAP and confusion matrices.

Conventions:

* matching is greedy in descending score within each (image, class) partition;
  a detection takes the best-IoU *unmatched* ground truth of its class;
* P, R and F1 are 0 when their denominator is 0;
* AP is all-point interpolation of the monotone precision envelope, with
  tied scores treated as a single threshold;
* P/R/F1 and the confusion matrix only see detections with
  ``score >= conf_threshold``; PR curves and AP use every detection.

Inputs are sorted canonically before matching, so results do not depend on
the row order of the input files.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ._fmt import fmt_pct

Box = tuple[float, float, float, float]


def _check_box(box) -> Box:
    box = tuple(float(v) for v in box)
    if len(box) != 4 or not all(math.isfinite(v) for v in box):
        raise ValueError(f"box must be 4 finite numbers, got {box!r}")
    x1, y1, x2, y2 = box
    if not (x2 > x1 and y2 > y1):
        raise ValueError(f"degenerate box {box!r}: need x2 > x1 and y2 > y1")
    return box  # type: ignore[return-value]


def _check_class(class_id) -> int:
    if isinstance(class_id, bool) or not isinstance(class_id, (int, np.integer)) or class_id < 0:
        raise ValueError(f"class_id must be a non-negative integer, got {class_id!r}")
    return int(class_id)


@dataclass(frozen=True)
class DetBox:
    image_id: str
    class_id: int
    score: float
    box: Box

    def __post_init__(self):
        object.__setattr__(self, "class_id", _check_class(self.class_id))
        object.__setattr__(self, "box", _check_box(self.box))
        score = float(self.score)
        if not (math.isfinite(score) and 0.0 <= score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score!r}")
        object.__setattr__(self, "score", score)


@dataclass(frozen=True)
class GtBox:
    image_id: str
    class_id: int
    box: Box

    def __post_init__(self):
        object.__setattr__(self, "class_id", _check_class(self.class_id))
        object.__setattr__(self, "box", _check_box(self.box))


def _det_key(d: DetBox):
    return (-d.score, d.image_id, d.class_id, d.box)


def _gt_key(g: GtBox):
    return (g.image_id, g.class_id, g.box)


def iou(a, b) -> float:
    """Intersection over union of two ``(x1, y1, x2, y2)`` boxes."""
    ax1, ay1, ax2, ay2 = _check_box(a)
    bx1, by1, bx2, by2 = _check_box(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


@dataclass(frozen=True)
class ClassMatch:
    """Per-class matching outcome, detections in descending score order."""

    class_id: int
    scores: tuple[float, ...]
    tp: tuple[bool, ...]
    n_gt: int

    @property
    def n_tp(self) -> int:
        return sum(self.tp)

    @property
    def fn(self) -> int:
        return self.n_gt - self.n_tp

    def at_threshold(self, conf: float) -> tuple[int, int, int]:
        """(TP, FP, FN) counting only detections with score >= ``conf``."""
        kept = [t for s, t in zip(self.scores, self.tp) if s >= conf]
        tp = sum(kept)
        return tp, len(kept) - tp, self.n_gt - tp


def _match_partition(dets: list[DetBox], gts: list[GtBox], thr: float) -> list[bool]:
    taken = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou(d.box, g.box)
            if v > best_iou:  # strict: ties keep the lower index
                best, best_iou = j, v
        if best >= 0 and best_iou >= thr:
            taken[best] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def match_detections(dets, gts, iou_threshold: float = 0.5) -> dict[int, ClassMatch]:
    """Greedy one-to-one matching, keyed by every class id seen in ``dets`` or ``gts``."""
    dets = sorted(dets, key=_det_key)
    gts = sorted(gts, key=_gt_key)
    det_parts: dict[tuple, list[int]] = defaultdict(list)
    gt_parts: dict[tuple, list[GtBox]] = defaultdict(list)
    for i, d in enumerate(dets):
        det_parts[(d.image_id, d.class_id)].append(i)
    for g in gts:
        gt_parts[(g.image_id, g.class_id)].append(g)

    flags = [False] * len(dets)
    for key, idx in det_parts.items():
        part = [dets[i] for i in idx]
        for i, f in zip(idx, _match_partition(part, gt_parts.get(key, []), iou_threshold)):
            flags[i] = f

    n_gt: dict[int, int] = defaultdict(int)
    for g in gts:
        n_gt[g.class_id] += 1
    classes = sorted({d.class_id for d in dets} | set(n_gt))
    out = {}
    for c in classes:
        mine = [i for i, d in enumerate(dets) if d.class_id == c]
        out[c] = ClassMatch(c, tuple(dets[i].score for i in mine), tuple(flags[i] for i in mine), n_gt[c])
    return out


def precision(tp: int, fp: int) -> float:
    return tp / (tp + fp) if tp + fp else 0.0


def recall(tp: int, fn: int) -> float:
    return tp / (tp + fn) if tp + fn else 0.0


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


def raw_pr_points(scores, tp_flags, total_gt: int) -> list[tuple[float, float]]:
    """(recall, precision) after each distinct score threshold, highest first."""
    if total_gt <= 0:
        return []
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    points = []
    tp = fp = 0
    for pos, i in enumerate(order):
        if tp_flags[i]:
            tp += 1
        else:
            fp += 1
        last_of_tie = pos + 1 == len(order) or scores[order[pos + 1]] != scores[i]
        if last_of_tie:
            points.append((tp / total_gt, tp / (tp + fp)))
    return points


def pr_curve(scores, tp_flags, total_gt: int) -> list[tuple[float, float]]:
    """PR points with the monotone envelope: each precision becomes the max at equal or higher recall."""
    points = raw_pr_points(scores, tp_flags, total_gt)
    suffix = [0.0] * (len(points) + 1)
    for i in range(len(points) - 1, -1, -1):
        suffix[i] = max(suffix[i + 1], points[i][1])
    env = []
    run_start = 0
    for i, (r, _) in enumerate(points):
        if i and r != points[i - 1][0]:
            run_start = i
        # recall is non-decreasing, so equal recalls are contiguous
        env.append((r, suffix[run_start]))
    return env


def ap(curve) -> float:
    """Area under an enveloped PR curve: sum of (r_i - r_{i-1}) * p_i from r_0 = 0."""
    total, prev_r = 0.0, 0.0
    for r, p in curve:
        total += (r - prev_r) * p
        prev_r = r
    return total


def mean_ap(aps) -> float:
    aps = list(aps)
    if not aps:
        raise ValueError("mean_ap needs at least one class AP")
    return sum(aps) / len(aps)


def confusion_matrix(dets, gts, num_classes: int, iou_threshold: float = 0.5, conf_threshold: float = 0.25) -> np.ndarray:
    """``(C+1, C+1)`` counts; rows are ground-truth classes, columns predictions, last index background.

    Matching is class-agnostic and greedy in descending IoU within each image.
    """
    for b in list(dets) + list(gts):
        if b.class_id >= num_classes:
            raise ValueError(f"class id {b.class_id} out of range for {num_classes} classes")
    bg = num_classes
    cm = np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64)
    dets = sorted((d for d in dets if d.score >= conf_threshold), key=_det_key)
    gts = sorted(gts, key=_gt_key)
    by_image: dict[str, tuple[list, list]] = defaultdict(lambda: ([], []))
    for d in dets:
        by_image[d.image_id][0].append(d)
    for g in gts:
        by_image[g.image_id][1].append(g)
    for image in sorted(by_image):
        ds, gs = by_image[image]
        pairs = []
        for j, g in enumerate(gs):
            for i, d in enumerate(ds):
                v = iou(d.box, g.box)
                if v >= iou_threshold:
                    pairs.append((-v, j, i))
        pairs.sort()
        used_g, used_d = set(), set()
        for _, j, i in pairs:
            if j in used_g or i in used_d:
                continue
            used_g.add(j)
            used_d.add(i)
            cm[gs[j].class_id, ds[i].class_id] += 1
        for j, g in enumerate(gs):
            if j not in used_g:
                cm[g.class_id, bg] += 1
        for i, d in enumerate(ds):
            if i not in used_d:
                cm[bg, d.class_id] += 1
    return cm


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    class_id: int
    instances: int
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    ap: float

    @property
    def notes(self) -> list[str]:
        out = []
        if self.tp + self.fp == 0:
            out.append("no predictions")
        if self.instances == 0:
            out.append("no instances")
        return out


@dataclass(frozen=True)
class EvalReport:
    classes: tuple[ClassMetrics, ...]
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    map: float
    confusion: np.ndarray
    pr_curves: dict
    iou_threshold: float = 0.5
    conf_threshold: float = 0.25
    class_names: tuple[str, ...] = field(default=())

    @property
    def instances(self) -> int:
        return sum(c.instances for c in self.classes)

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "conf_threshold": self.conf_threshold,
            "all": {
                "instances": self.instances,
                "tp": self.tp,
                "fp": self.fp,
                "fn": self.fn,
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
                "map": self.map,
            },
            "classes": [
                {
                    "name": c.name,
                    "class_id": c.class_id,
                    "instances": c.instances,
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "ap": c.ap,
                    "notes": c.notes,
                }
                for c in self.classes
            ],
            "confusion": {"labels": list(self.class_names) + ["background"], "matrix": self.confusion.tolist()},
            "pr_curves": {name: [list(pt) for pt in pts] for name, pts in self.pr_curves.items()},
        }


def eval_report(dets, gts, class_names, iou_threshold: float = 0.5, conf_threshold: float = 0.25) -> EvalReport:
    class_names = tuple(class_names)
    dets, gts = list(dets), list(gts)
    for b in dets + gts:
        if b.class_id >= len(class_names):
            raise ValueError(f"class id {b.class_id} out of range for {len(class_names)} class names")
    matches = match_detections(dets, gts, iou_threshold)
    rows, curves, aps = [], {}, []
    for c, name in enumerate(class_names):
        m = matches.get(c, ClassMatch(c, (), (), 0))
        tp, fp, fn = m.at_threshold(conf_threshold)
        p, r = precision(tp, fp), recall(tp, fn)
        curve = pr_curve(m.scores, m.tp, m.n_gt)
        class_ap = ap(curve)
        curves[name] = curve
        if m.n_gt > 0:
            aps.append(class_ap)
        rows.append(ClassMetrics(name, c, m.n_gt, tp, fp, fn, p, r, f1(p, r), class_ap))
    tp = sum(r.tp for r in rows)
    fp = sum(r.fp for r in rows)
    fn = sum(r.fn for r in rows)
    p, r = precision(tp, fp), recall(tp, fn)
    return EvalReport(
        classes=tuple(rows),
        tp=tp,
        fp=fp,
        fn=fn,
        precision=p,
        recall=r,
        f1=f1(p, r),
        map=mean_ap(aps) if aps else 0.0,
        confusion=confusion_matrix(dets, gts, len(class_names), iou_threshold, conf_threshold),
        pr_curves=curves,
        iou_threshold=iou_threshold,
        conf_threshold=conf_threshold,
        class_names=class_names,
    )


# --------------------------------------------------------------------------
# file formats and rendering
# --------------------------------------------------------------------------

DET_HEADER = ["image_id", "class_id", "score", "x1", "y1", "x2", "y2"]
GT_HEADER = ["image_id", "class_id", "x1", "y1", "x2", "y2"]


def _read_rows(path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None or [h.strip() for h in first] != header:
            raise ValueError(f"{path}:1: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not v.strip() for v in row):
                continue
            yield reader.line_num, [v.strip() for v in row]


def read_detections_csv(path) -> list[DetBox]:
    out = []
    for line, row in _read_rows(path, DET_HEADER):
        try:
            if len(row) != len(DET_HEADER):
                raise ValueError(f"expected {len(DET_HEADER)} fields, got {len(row)}")
            out.append(DetBox(row[0], int(row[1]), float(row[2]), tuple(float(v) for v in row[3:7])))
        except ValueError as exc:
            raise ValueError(f"{path}:{line}: {exc}") from None
    return out


def read_ground_truth_csv(path) -> list[GtBox]:
    out = []
    for line, row in _read_rows(path, GT_HEADER):
        try:
            if len(row) != len(GT_HEADER):
                raise ValueError(f"expected {len(GT_HEADER)} fields, got {len(row)}")
            out.append(GtBox(row[0], int(row[1]), tuple(float(v) for v in row[2:6])))
        except ValueError as exc:
            raise ValueError(f"{path}:{line}: {exc}") from None
    return out


def read_class_names(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        names = [line.strip() for line in fh.read().splitlines()]
    while names and not names[-1]:
        names.pop()
    if not names or any(not n for n in names):
        raise ValueError(f"{path}: class names must be one non-empty name per line")
    return names


def format_report_table(report: EvalReport) -> str:
    """Per-class table with an ``All`` row; percentages to one decimal, half-up."""
    header = ["Class", "Instances", "Precision (%)", "Recall (%)", "F1 score (%)", f"mAP@{report.iou_threshold:g} (%)"]
    rows = [["All", str(report.instances), fmt_pct(report.precision), fmt_pct(report.recall),
             fmt_pct(report.f1), fmt_pct(report.map)]]
    for c in report.classes:
        rows.append([c.name, str(c.instances), fmt_pct(c.precision), fmt_pct(c.recall), fmt_pct(c.f1), fmt_pct(c.ap)])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]

    def line(r):
        return "  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths)))

    lines = [line(header)] + [line(r) for r in rows]
    notes = [f"  {c.name}: {', '.join(c.notes)}" for c in report.classes if c.notes]
    if notes:
        lines += ["", "notes:"] + notes
    return "\n".join(lines) + "\n"


def pr_curve_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "recall", "precision"])
    for name in report.class_names:
        for r, p in report.pr_curves[name]:
            w.writerow([name, repr(r), repr(p)])
    return buf.getvalue()


def confusion_csv(report: EvalReport) -> str:
    labels = list(report.class_names) + ["background"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class"] + labels)
    for label, row in zip(labels, report.confusion.tolist()):
        w.writerow([label] + row)
    return buf.getvalue()
