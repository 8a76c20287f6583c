"""Detection evaluation: greedy matching, precision/recall/F1, per-class AP
and mAP.

Matching is class-aware and greedy in descending score order; AP is the
all-point area under the precision envelope versus recall. Zero denominators
(no detections, no ground truth) yield 0 for precision/recall/F1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .boxgeom import Detection, LabeledBox, iou


@dataclass
class MatchResult:
    """Counts plus per-detection TP flags aligned with score-sorted order."""

    tp_count: int
    fp_count: int
    fn_count: int
    is_tp: list[bool]


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    per_class_ap: dict[int, float]
    map_score: float
    score_threshold: float
    iou_threshold: float


def match_detections(
    dets: list[Detection], gts: list[LabeledBox], iou_threshold: float
) -> MatchResult:
    """Greedily match detections to ground truth within one image.

    Detections are processed in descending score order (ties broken by input
    index). Each detection matches the unmatched same-class ground truth of
    highest IoU, provided that IoU >= iou_threshold; ground-truth ties go to
    the lowest index. Unmatched detections are FP, unmatched ground truths FN.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    claimed = [False] * len(gts)
    is_tp: list[bool] = []
    for i in order:
        det = dets[i]
        best_j = -1
        best_iou = 0.0
        for j, gt in enumerate(gts):
            if claimed[j] or gt.class_id != det.class_id:
                continue
            overlap = iou(det.box, gt.box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_j, best_iou = j, overlap
        if best_j >= 0:
            claimed[best_j] = True
            is_tp.append(True)
        else:
            is_tp.append(False)
    tp = sum(is_tp)
    return MatchResult(tp, len(dets) - tp, len(gts) - tp, is_tp)


def precision_recall_f1(m: MatchResult) -> tuple[float, float, float]:
    """Precision TP/(TP+FP), recall TP/(TP+FN), and their harmonic mean."""
    p = m.tp_count / (m.tp_count + m.fp_count) if m.tp_count + m.fp_count > 0 else 0.0
    r = m.tp_count / (m.tp_count + m.fn_count) if m.tp_count + m.fn_count > 0 else 0.0
    f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f1


def _ranked_flags_for_class(
    image_results: list[tuple[list[Detection], list[LabeledBox]]],
    class_id: int,
    iou_threshold: float,
) -> tuple[list[tuple[float, bool]], int]:
    """Pool per-image greedy matches for one class into a globally ranked list."""
    pooled: list[tuple[float, int, int, bool]] = []
    n_gt = 0
    for img_idx, (dets, gts) in enumerate(image_results):
        cls_dets = [d for d in dets if d.class_id == class_id]
        cls_gts = [g for g in gts if g.class_id == class_id]
        n_gt += len(cls_gts)
        m = match_detections(cls_dets, cls_gts, iou_threshold)
        order = sorted(range(len(cls_dets)), key=lambda i: (-cls_dets[i].score, i))
        for rank, i in enumerate(order):
            pooled.append((cls_dets[i].score, img_idx, i, m.is_tp[rank]))
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(s, tp) for s, _, _, tp in pooled], n_gt


def _ap_from_ranked(flags: list[bool], n_gt: int) -> float:
    """All-point AP: area under the precision envelope versus recall."""
    if n_gt == 0:
        return 0.0
    recalls: list[float] = []
    precisions: list[float] = []
    tp = 0
    for k, flag in enumerate(flags, start=1):
        tp += flag
        recalls.append(tp / n_gt)
        precisions.append(tp / k)
    # envelope: running max of precision from the right
    envelope = [0.0] * len(precisions)
    running = 0.0
    for i in range(len(precisions) - 1, -1, -1):
        running = max(running, precisions[i])
        envelope[i] = running
    ap = 0.0
    prev_recall = 0.0
    for r, env in zip(recalls, envelope):
        ap += (r - prev_recall) * env
        prev_recall = r
    return ap


def average_precision(
    dets: list[Detection],
    gts: list[LabeledBox],
    class_id: int,
    iou_threshold: float,
) -> float:
    """Single-scene all-point AP for one class; 0 when the class has no ground truth."""
    ranked, n_gt = _ranked_flags_for_class([(dets, gts)], class_id, iou_threshold)
    return _ap_from_ranked([tp for _, tp in ranked], n_gt)


def evaluate_detections(
    image_results: list[tuple[list[Detection], list[LabeledBox]]],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
) -> MetricsReport:
    """Dataset-level evaluation: per-class pooled AP, mAP, and thresholded P/R/F1.

    AP per class pools detections over all images (per-image greedy matching,
    global score ranking). Classes are those present in the ground truth;
    raises ValueError when there is no ground truth at all (mAP undefined).
    Precision/recall/F1 are computed over detections with
    score >= score_threshold.
    """
    classes = sorted({g.class_id for _, gts in image_results for g in gts})
    if not classes:
        raise ValueError("mAP undefined: no ground truth boxes in any image")
    per_class_ap: dict[int, float] = {}
    for c in classes:
        ranked, n_gt = _ranked_flags_for_class(image_results, c, iou_threshold)
        per_class_ap[c] = _ap_from_ranked([tp for _, tp in ranked], n_gt)
    map_score = sum(per_class_ap.values()) / len(per_class_ap)
    tp = fp = fn = 0
    for dets, gts in image_results:
        kept = [d for d in dets if d.score >= score_threshold]
        m = match_detections(kept, gts, iou_threshold)
        tp += m.tp_count
        fp += m.fp_count
        fn += m.fn_count
    totals = MatchResult(tp, fp, fn, [])
    p, r, f1 = precision_recall_f1(totals)
    return MetricsReport(p, r, f1, per_class_ap, map_score, score_threshold, iou_threshold)


def mean_ap(
    dets: list[Detection],
    gts: list[LabeledBox],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
) -> MetricsReport:
    """Single-scene evaluation; see :func:`evaluate_detections`."""
    return evaluate_detections([(dets, gts)], iou_threshold, score_threshold)


def pr_curve(
    image_results: list[tuple[list[Detection], list[LabeledBox]]],
    class_id: int,
    iou_threshold: float = 0.5,
) -> tuple[list[float], list[float]]:
    """(recalls, precisions) along the pooled score-ranked detection list."""
    ranked, n_gt = _ranked_flags_for_class(image_results, class_id, iou_threshold)
    recalls: list[float] = []
    precisions: list[float] = []
    tp = 0
    for k, (_, flag) in enumerate(ranked, start=1):
        tp += flag
        recalls.append(tp / n_gt if n_gt else 0.0)
        precisions.append(tp / k)
    return recalls, precisions


def format_report(report: MetricsReport) -> str:
    """Serialize a report as line-oriented text: one record per class plus a summary."""
    lines = ["metrics_version 1"]
    lines.append(f"iou_threshold {report.iou_threshold:.6f}")
    lines.append(f"score_threshold {report.score_threshold:.6f}")
    for c in sorted(report.per_class_ap):
        lines.append(f"class {c} ap {report.per_class_ap[c]:.6f}")
    lines.append(
        "summary f1 {:.6f} recall {:.6f} precision {:.6f} map {:.6f}".format(
            report.f1, report.recall, report.precision, report.map_score
        )
    )
    return "\n".join(lines) + "\n"


def save_report(report: MetricsReport, path: str | Path) -> None:
    Path(path).write_text(format_report(report))


def load_report(path: str | Path) -> MetricsReport:
    """Inverse of :func:`format_report`."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "metrics_version 1":
        raise ValueError(f"{path}: not a metrics report (missing version line)")
    iou_thr = score_thr = 0.0
    per_class: dict[int, float] = {}
    summary: dict[str, float] = {}
    for line in lines[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "iou_threshold":
            iou_thr = float(parts[1])
        elif parts[0] == "score_threshold":
            score_thr = float(parts[1])
        elif parts[0] == "class":
            per_class[int(parts[1])] = float(parts[3])
        elif parts[0] == "summary":
            summary = {parts[i]: float(parts[i + 1]) for i in range(1, len(parts), 2)}
        else:
            raise ValueError(f"{path}: unknown report field {parts[0]!r}")
    return MetricsReport(
        precision=summary.get("precision", 0.0),
        recall=summary.get("recall", 0.0),
        f1=summary.get("f1", 0.0),
        per_class_ap=per_class,
        map_score=summary.get("map", 0.0),
        score_threshold=score_thr,
        iou_threshold=iou_thr,
    )
