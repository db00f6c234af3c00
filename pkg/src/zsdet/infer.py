"""Test-time prediction paths.

Two inference routes share the same score normalization:

* :func:`detect` - for models trained with unseen embeddings in place: a
  proposal whose top normalized score is background is discarded; otherwise
  the best unseen class is emitted iff its score is strictly above the
  threshold, with the box decoded from the offsets of the best *seen* class
  (no boxes are ever regressed for unseen classes).
* :func:`conse_detect` - for seen-only checkpoints: the proposal is
  projected into semantic space as the top-K score-weighted sum of seen
  class vectors and classified by cosine against the unseen vectors.

Ties break toward the lowest class id everywhere.  Proposals with zero-norm
features cannot be normalized and are treated as background.  Per-class NMS
(default IoU 0.5) runs before results are returned; pass ``nms_iou=0`` to
disable it.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import ConfigError, CoverageError, ParseError
from .evaluation import nms
from .model import Model, box_slice, decode_boxes, forward_boxes, forward_scores
from .semantics import LabelSpace

if TYPE_CHECKING:
    from .data import Proposal


@dataclass(frozen=True)
class Detection:
    """One emitted detection; ``label`` is an unseen class id (or a meta id
    after :func:`reduce_to_meta`)."""

    image_id: str
    label: int
    score: float
    box: np.ndarray


def _normalized(model: Model, feature: np.ndarray) -> np.ndarray | None:
    """Normalized score vector, or None for a zero-norm feature (background)."""
    feature = np.asarray(feature, dtype=np.float64)
    fnorm = float(np.linalg.norm(feature))
    if fnorm == 0.0:
        return None
    o = forward_scores(model, feature)
    return o / (model.col_norms * fnorm)


def _seen_box(model: Model, feature: np.ndarray, scores: np.ndarray, box) -> np.ndarray:
    """Decode the proposal with the offsets of the highest-scoring seen class."""
    s_star = int(np.argmax(scores[: model.n_seen])) + 1
    offsets = forward_boxes(model, feature)[box_slice(s_star)]
    return decode_boxes(np.asarray(box, dtype=np.float64), offsets)


def _apply_class_nms(detections: list[Detection], nms_iou: float) -> list[Detection]:
    if nms_iou <= 0.0 or not detections:
        return detections
    kept: list[Detection] = []
    for label in sorted({d.label for d in detections}):
        kept.extend(nms([d for d in detections if d.label == label], nms_iou))
    return kept


def detect(
    model: Model,
    space: LabelSpace,
    proposals: Sequence["Proposal"],
    image_id: str,
    alpha: float,
    nms_iou: float = 0.5,
) -> list[Detection]:
    """Unseen-class detections for one image's proposals.

    Emits a detection only when the background is not the top label and the
    best unseen normalized score is strictly above ``alpha``.
    """
    out: list[Detection] = []
    bg_col = space.bg_id - 1
    s, c = space.S, space.C
    for prop in proposals:
        scores = _normalized(model, prop.feature)
        if scores is None:
            continue
        if int(np.argmax(scores)) == bg_col:
            continue
        u_col = s + int(np.argmax(scores[s:c]))
        score = float(scores[u_col])
        if score > alpha:
            box = _seen_box(model, prop.feature, scores, prop.box)
            out.append(Detection(image_id, u_col + 1, score, box))
    return _apply_class_nms(out, nms_iou)


def conse_project(
    seen_scores: np.ndarray, seen_vectors: np.ndarray, k: int
) -> np.ndarray:
    """Top-K score-weighted sum of seen class vectors.

    ``seen_vectors`` holds one column per seen class.  Sorting is stable
    with ties broken toward the lower class id; background never enters the
    list (its column is a mean, not a class).
    """
    seen_scores = np.asarray(seen_scores, dtype=np.float64)
    n_seen = seen_scores.size
    if not 1 <= k <= n_seen:
        raise ConfigError(f"K must be in 1..{n_seen}, got {k}")
    order = np.argsort(-seen_scores, kind="stable")[:k]
    return seen_vectors[:, order] @ seen_scores[order]


def conse_detect(
    model: Model,
    space: LabelSpace,
    proposals: Sequence["Proposal"],
    image_id: str,
    k: int = 10,
    alpha: float = 0.1,
    nms_iou: float = 0.5,
) -> list[Detection]:
    """ConSE-style detections: classify the projected proposal by cosine.

    Reads only seen and background score entries, so it works with any
    checkpoint regardless of training mode.  A proposal is dropped when the
    background outranks every seen class or its projection is zero.
    """
    out: list[Detection] = []
    s = space.S
    bg_col = space.bg_id - 1
    u_cols = np.arange(s, space.C)
    for prop in proposals:
        scores = _normalized(model, prop.feature)
        if scores is None:
            continue
        if scores[bg_col] > scores[:s].max():
            continue
        e = conse_project(scores[:s], model.w2[:, :s], k)
        e_norm = float(np.linalg.norm(e))
        if e_norm == 0.0:
            continue
        cos = (model.w2[:, u_cols].T @ e) / (e_norm * model.col_norms[u_cols])
        u_idx = int(np.argmax(cos))
        score = float(cos[u_idx])
        if score > alpha:
            box = _seen_box(model, prop.feature, scores, prop.box)
            out.append(Detection(image_id, s + u_idx + 1, score, box))
    return _apply_class_nms(out, nms_iou)


def reduce_to_meta(detections: Sequence[Detection], space: LabelSpace) -> list[Detection]:
    """Replace each unseen class id by its meta id; scores and boxes unchanged."""
    out = []
    for d in detections:
        if not space.is_unseen(d.label):
            raise CoverageError(f"detection label {d.label} is not an unseen class id")
        out.append(Detection(d.image_id, space.meta_of(d.label), d.score, d.box))
    return out


def tag_image(
    model: Model,
    space: LabelSpace,
    proposals: Sequence["Proposal"],
    mode: str = "class",
) -> dict[int, float]:
    """Image-level score per unseen label (or meta label): max over proposals.

    No threshold is applied; the scores feed average precision directly.
    Zero-norm proposals are skipped; with no usable proposal all scores are 0.
    """
    if mode not in ("class", "meta"):
        raise ConfigError(f"mode must be 'class' or 'meta', got {mode!r}")
    s, c = space.S, space.C
    best = np.full(c - s, -np.inf)
    any_valid = False
    for prop in proposals:
        scores = _normalized(model, prop.feature)
        if scores is None:
            continue
        any_valid = True
        best = np.maximum(best, scores[s:c])
    if not any_valid:
        best = np.zeros(c - s)
    class_tags = {s + i + 1: float(best[i]) for i in range(c - s)}
    if mode == "class":
        return class_tags
    meta_tags: dict[int, float] = {}
    for mid in range(1, space.M + 1):
        members = space.unseen_members(mid)
        if members:
            meta_tags[mid] = max(class_tags[cid] for cid in members)
    return meta_tags


def recognize_top1(
    model: Model, space: LabelSpace, proposals: Sequence["Proposal"]
) -> int:
    """Single best unseen class for an image; ties go to the lowest id."""
    tags = tag_image(model, space, proposals, mode="class")
    best_id, best_score = None, -np.inf
    for cid in sorted(tags):
        if tags[cid] > best_score:
            best_id, best_score = cid, tags[cid]
    return int(best_id)


def dump_detections(
    detections: Sequence[Detection], path: str | os.PathLike, space: LabelSpace
) -> None:
    """Write the JSON-lines detection dump, one object per detection."""
    with open(path, "w", encoding="utf-8") as f:
        for d in detections:
            rec = {
                "image_id": d.image_id,
                "label": space.label_of(d.label),
                "score": d.score,
                "box": [float(v) for v in d.box],
            }
            f.write(json.dumps(rec) + "\n")


def load_detections(path: str | os.PathLike, space: LabelSpace) -> list[Detection]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Detection(
                        rec["image_id"],
                        space.id_of(rec["label"]),
                        float(rec["score"]),
                        np.array(rec["box"], dtype=np.float64),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ParseError(f"bad detection record: {exc}", lineno)
    return out
