"""Detection geometry and the four-task evaluation protocol.

Average precision uses all-points interpolation (precision envelope) with
greedy score-ordered matching: each detection matches the highest-IoU
still-unmatched ground truth in its image at or above the IoU threshold.
Classes without any ground truth are excluded from the mean.

Tasks:
  T1  per-unseen-class box AP (zero-shot detection)
  T2  boxes relabeled to meta-classes (zero-shot meta-class detection)
  T3  image-level AP per unseen class from tag scores (zero-shot tagging)
  T4  image-level AP per meta-class (zero-shot meta-class tagging)

For tagging, a label is a positive for an image iff the image has at least
one ground truth of that label; meta tag scores reduce over the meta's
unseen members.  These readings are echoed in the report metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .errors import ConfigError
from .semantics import LabelSpace

if TYPE_CHECKING:
    from .infer import Detection

TASKS = ("T1", "T2", "T3", "T4")
TASK_NAMES = {
    "T1": "ZSD",
    "T2": "ZSMD",
    "T3": "ZST",
    "T4": "ZSMT",
}


@dataclass(frozen=True)
class GroundTruth:
    """One annotated box: image, class id, corners."""

    image_id: str
    label: int
    box: np.ndarray


@dataclass(frozen=True)
class ApRow:
    label: int
    name: str
    ap: float
    n_gt: int
    n_det: int


@dataclass
class DetectionReport:
    """Per-class AP table plus the task mAP and evaluation settings."""

    task: str
    rows: list[ApRow]
    mean_ap: float
    meta: dict = field(default_factory=dict)


def iou(box_a, box_b) -> float:
    """Intersection-over-union of two well-ordered boxes; degenerate -> 0."""
    ax1, ay1, ax2, ay2 = (float(v) for v in box_a)
    bx1, by1, bx2, by2 = (float(v) for v in box_b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def nms(detections: Sequence["Detection"], iou_thresh: float) -> list["Detection"]:
    """Greedy suppression for one class: keep highest score, drop IoU > thresh.

    Score ties break by ascending original index; output is ordered by
    descending score.
    """
    if not detections:
        return []
    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for idx in order:
        if all(iou(detections[idx].box, detections[k].box) <= iou_thresh for k in kept):
            kept.append(int(idx))
    return [detections[k] for k in kept]


def average_precision(
    detections: Sequence["Detection"],
    ground_truths: Sequence[GroundTruth],
    iou_thresh: float,
) -> float:
    """All-points interpolated AP for a single class.

    Raises ValueError when there is no ground truth; such classes are
    excluded from mAP by :func:`evaluate`.
    """
    if not ground_truths:
        raise ValueError("average precision is undefined with zero ground truths")
    n_gt = len(ground_truths)
    if not detections:
        return 0.0

    gt_by_image: dict[str, list[int]] = {}
    for gi, gt in enumerate(ground_truths):
        gt_by_image.setdefault(gt.image_id, []).append(gi)
    matched = np.zeros(n_gt, dtype=bool)

    scores = np.array([d.score for d in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(order.size)
    fp = np.zeros(order.size)
    for rank, di in enumerate(order):
        det = detections[di]
        best_iou, best_gi = 0.0, -1
        for gi in gt_by_image.get(det.image_id, ()):
            if matched[gi]:
                continue
            overlap = iou(det.box, ground_truths[gi].box)
            if overlap >= iou_thresh and overlap > best_iou:
                best_iou, best_gi = overlap, gi
        if best_gi >= 0:
            matched[best_gi] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-300)
    return _envelope_area(recall, precision)


def _envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the precision envelope over recall (all-points rule)."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _ranking_ap(ranked_positive_flags: Sequence[bool], n_pos: int) -> float:
    """AP of a ranked binary list (image-level tagging)."""
    if n_pos == 0:
        raise ValueError("undefined with zero positives")
    if not ranked_positive_flags:
        return 0.0
    flags = np.asarray(ranked_positive_flags, dtype=np.float64)
    cum_tp = np.cumsum(flags)
    cum_n = np.arange(1, flags.size + 1)
    recall = cum_tp / n_pos
    precision = cum_tp / cum_n
    return _envelope_area(recall, precision)


def _check_unseen_detections(detections, space: LabelSpace) -> None:
    for d in detections:
        if not space.is_unseen(d.label):
            raise ConfigError(
                f"detection label {d.label} is not an unseen class id; "
                "T1/T2 expect unseen-class detections"
            )


def evaluate(
    model_outputs,
    ground_truths: Sequence[GroundTruth],
    space: LabelSpace,
    task: str,
    iou_thresh: float = 0.5,
) -> DetectionReport:
    """Score one task.

    T1/T2 take unseen-class :class:`Detection` lists (T2 relabels both sides
    through the meta map).  T3/T4 take per-image class tag scores, a mapping
    ``image_id -> {unseen class id: score}`` (T4 reduces to meta scores by
    max over each meta's unseen members).
    """
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    gts_u = [g for g in ground_truths if space.is_unseen(g.label)]

    rows: list[ApRow] = []
    meta = {
        "task": task,
        "task_name": TASK_NAMES[task],
        "iou_thresh": iou_thresh,
        "interpolation": "all-points precision envelope",
        "tagging": "image-level AP; a label is positive for an image iff the "
        "image holds >=1 ground truth of it; meta tag score = max "
        "over the meta's unseen members",
    }

    if task in ("T1", "T2"):
        detections = list(model_outputs)
        _check_unseen_detections(detections, space)
        if task == "T2":
            from .infer import reduce_to_meta

            detections = reduce_to_meta(detections, space)
            gts_u = [
                GroundTruth(g.image_id, space.meta_of(g.label), g.box) for g in gts_u
            ]
            eval_ids = sorted({g.label for g in gts_u})
            name_of = space.meta_label_of
        else:
            eval_ids = sorted({g.label for g in gts_u})
            name_of = space.label_of
        for cid in eval_ids:
            dets_c = [d for d in detections if d.label == cid]
            gts_c = [g for g in gts_u if g.label == cid]
            ap = average_precision(dets_c, gts_c, iou_thresh)
            rows.append(ApRow(cid, name_of(cid), ap, len(gts_c), len(dets_c)))
    else:
        tags: Mapping[str, Mapping[int, float]] = model_outputs
        image_ids = list(tags.keys())
        pos_by_label: dict[int, set[str]] = {}
        for g in gts_u:
            pos_by_label.setdefault(g.label, set()).add(g.image_id)
        if task == "T4":
            meta_pos: dict[int, set[str]] = {}
            for cid, imgs in pos_by_label.items():
                meta_pos.setdefault(space.meta_of(cid), set()).update(imgs)
            pos_by_label = meta_pos
            label_scores = {}
            for img in image_ids:
                class_scores = tags[img]
                reduced: dict[int, float] = {}
                for mid in sorted(pos_by_label):
                    members = [c for c in space.unseen_members(mid) if c in class_scores]
                    if members:
                        reduced[mid] = max(class_scores[c] for c in members)
                label_scores[img] = reduced
            name_of = space.meta_label_of
        else:
            label_scores = tags
            name_of = space.label_of
        for lid in sorted(pos_by_label):
            positives = pos_by_label[lid]
            scored = [
                (img, label_scores[img][lid])
                for img in image_ids
                if lid in label_scores[img]
            ]
            scored.sort(key=lambda t: -t[1])
            flags = [img in positives for img, _ in scored]
            ap = _ranking_ap(flags, len(positives))
            rows.append(ApRow(lid, name_of(lid), ap, len(positives), len(scored)))

    mean_ap = float(np.mean([r.ap for r in rows])) if rows else 0.0
    return DetectionReport(task=task, rows=rows, mean_ap=mean_ap, meta=meta)


def top1_accuracy(
    predictions: Mapping[str, int], gt_labels: Mapping[str, int]
) -> float:
    """Class-balanced top-1 accuracy: mean over classes of per-class accuracy."""
    if not gt_labels:
        raise ConfigError("no ground-truth labels")
    missing = [img for img in gt_labels if img not in predictions]
    if missing:
        raise ConfigError(f"missing predictions for images: {missing[:5]}")
    per_class: dict[int, list[bool]] = {}
    for img, gt in gt_labels.items():
        per_class.setdefault(gt, []).append(predictions[img] == gt)
    accs = [float(np.mean(hits)) for _, hits in sorted(per_class.items())]
    return float(np.mean(accs))


def render_report(report: DetectionReport) -> str:
    """Aligned text table, one row per evaluated label."""
    lines = [
        f"task {report.task} ({TASK_NAMES[report.task]})  "
        f"iou={report.meta.get('iou_thresh', '-')}  mAP={report.mean_ap:.4f}"
    ]
    if report.rows:
        name_w = max(len(r.name) for r in report.rows)
        name_w = max(name_w, len("label"))
        lines.append(f"  {'label':<{name_w}}  {'id':>4}  {'AP':>8}  {'#gt':>5}  {'#det':>6}")
        for r in report.rows:
            lines.append(
                f"  {r.name:<{name_w}}  {r.label:>4}  {r.ap:>8.4f}  {r.n_gt:>5}  {r.n_det:>6}"
            )
    return "\n".join(lines)


def report_to_dict(report: DetectionReport) -> dict:
    return {
        "task": report.task,
        "task_name": TASK_NAMES[report.task],
        "mean_ap": report.mean_ap,
        "per_class": [
            {
                "label": r.label,
                "name": r.name,
                "ap": r.ap,
                "n_gt": r.n_gt,
                "n_det": r.n_det,
            }
            for r in report.rows
        ],
        "meta": report.meta,
    }
