"""Margin and clustering losses, smooth-L1 regression, and their gradients.

The classification loss mixes two ranking terms: a max-margin loss that
separates the target's score from every other label, and a meta-class
clustering loss that pushes the scores of the target's meta-class members
above the scores of all labels outside that meta-class.  Both are means of
``log(1 + exp(o_c - o_j))`` terms and are evaluated through
``np.logaddexp(0, .)`` so score gaps of several hundred do not overflow.

In ``seen_only`` mode (training without predefined unseen classes) the
margin loss reads only the seen and background entries and the clustering
term is dropped entirely; the reported mixing weight is then 1.0 so the
breakdown identity ``l_cls = lam*l_mm + (1-lam)*l_mc`` always holds.

Gradient convention: the batch classification loss is averaged over all
samples, while the regression loss is averaged over foreground samples
only (background and unseen carry no box loss).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigError, InvalidTargetError, NumericFailureError, ShapeError
from .model import Model, RegionSample, box_slice, encode_boxes
from .semantics import LabelSpace

MODES = ("full", "seen_only")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step loss components; ``lam`` is the effective mixing weight."""

    l_mm: float
    l_mc: float
    l_cls: float
    l_reg: float
    total: float
    lam: float


@dataclass
class Gradients:
    """Analytic gradients shaped like the trainable parameters."""

    dw1: np.ndarray
    dbox: np.ndarray
    dbox_b: np.ndarray


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _check_target(y: int | None, space: LabelSpace) -> int:
    if y is None:
        raise InvalidTargetError("sample has no training label")
    if space.is_unseen(y):
        raise InvalidTargetError(
            f"target {y} is an unseen class; unseen classes are never supervised"
        )
    if not (space.is_seen(y) or y == space.bg_id):
        raise InvalidTargetError(f"target {y} outside the extended label set")
    return y


@lru_cache(maxsize=8192)
def _margin_cols(space: LabelSpace, y: int, mode: str) -> np.ndarray:
    """0-based score columns compared against the target for L_mm."""
    if mode == "full":
        ids = [c for c in range(1, space.bg_id + 1) if c != y]
    elif mode == "seen_only":
        ids = [c for c in list(space.seen_ids) + [space.bg_id] if c != y]
    else:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    cols = np.array(ids, dtype=np.intp) - 1
    cols.flags.writeable = False
    return cols


@lru_cache(maxsize=8192)
def _cluster_cols(space: LabelSpace, y: int) -> tuple[np.ndarray, np.ndarray]:
    """(member, outside) 0-based columns for the clustering loss of target y."""
    z = np.array(space.members(space.meta_of(y)), dtype=np.intp) - 1
    inside = np.zeros(space.bg_id, dtype=bool)
    inside[z] = True
    out = np.nonzero(~inside)[0]
    z.flags.writeable = False
    out.flags.writeable = False
    return z, out


def _margin_terms(
    o: np.ndarray, y: int, space: LabelSpace, mode: str
) -> tuple[float, np.ndarray]:
    cols = _margin_cols(space, y, mode)
    diffs = o[cols] - o[y - 1]
    loss = float(_softplus(diffs).mean())
    grad = np.zeros_like(o)
    w = _sigmoid(diffs) / cols.size
    np.add.at(grad, cols, w)
    grad[y - 1] -= w.sum()
    return loss, grad


def _margin_value(o: np.ndarray, y: int, space: LabelSpace, mode: str) -> float:
    cols = _margin_cols(space, y, mode)
    return float(_softplus(o[cols] - o[y - 1]).mean())


def _cluster_terms(
    o: np.ndarray, y: int, space: LabelSpace
) -> tuple[float, np.ndarray]:
    z, out = _cluster_cols(space, y)
    diffs = o[out][:, None] - o[z][None, :]
    loss = float(_softplus(diffs).mean())
    grad = np.zeros_like(o)
    w = _sigmoid(diffs) / diffs.size
    grad[out] += w.sum(axis=1)
    grad[z] -= w.sum(axis=0)
    return loss, grad


def _cluster_value(o: np.ndarray, y: int, space: LabelSpace) -> float:
    z, out = _cluster_cols(space, y)
    return float(_softplus(o[out][:, None] - o[z][None, :]).mean())


def max_margin_loss(
    o: np.ndarray, y: int, space: LabelSpace, mode: str = "full"
) -> float:
    """Mean softplus margin of every non-target label against the target.

    ``full`` ranges over all classes plus background; ``seen_only`` reads
    only the seen and background entries (the L'_mm variant).
    """
    o = _check_scores(o, space)
    y = _check_target(y, space)
    return _margin_value(o, y, space, mode)


def clustering_loss(o: np.ndarray, y: int, space: LabelSpace) -> float:
    """Pair-mean softplus of outside-meta scores over the target meta's members.

    With z the members of the target's meta-class, every label outside z
    (including background) is ranked against every member of z; the sum is
    normalized by the pair count.
    """
    o = _check_scores(o, space)
    y = _check_target(y, space)
    return _cluster_value(o, y, space)


def classification_loss(
    o: np.ndarray, y: int, space: LabelSpace, lam: float, mode: str = "full"
) -> LossBreakdown:
    """Mix margin and clustering terms: ``lam*L_mm + (1-lam)*L_mc``."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    o = _check_scores(o, space)
    y = _check_target(y, space)
    if mode == "seen_only":
        l_mm = _margin_value(o, y, space, mode)
        return LossBreakdown(l_mm, 0.0, l_mm, 0.0, l_mm, 1.0)
    if mode != "full":
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    l_mm = _margin_value(o, y, space, mode)
    l_mc = _cluster_value(o, y, space)
    l_cls = lam * l_mm + (1.0 - lam) * l_mc
    return LossBreakdown(l_mm, l_mc, l_cls, 0.0, l_cls, lam)


def smooth_l1(x: np.ndarray) -> np.ndarray:
    """Elementwise smooth-L1 with transition point 1.0."""
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def regression_loss(
    pred_offsets: np.ndarray,
    proposal_box: np.ndarray,
    gt_box: np.ndarray,
    y: int,
    space: LabelSpace,
) -> float:
    """Smooth-L1 over the 4 offsets of the target class slice.

    Background and unseen targets contribute zero by contract: no box is
    regressed for labels without visual training examples.
    """
    if not space.is_seen(y):
        return 0.0
    pred_offsets = np.asarray(pred_offsets, dtype=np.float64)
    if pred_offsets.shape != (4 * space.S,):
        raise ShapeError(
            f"expected {4 * space.S} offsets, got shape {pred_offsets.shape}"
        )
    target = encode_boxes(np.asarray(gt_box), np.asarray(proposal_box))
    return float(smooth_l1(pred_offsets[box_slice(y)] - target).sum())


def _check_scores(o: np.ndarray, space: LabelSpace) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    if o.shape != (space.bg_id,):
        raise ShapeError(f"expected score vector of length {space.bg_id}, got {o.shape}")
    return o


def loss_gradients(
    model: Model,
    batch: Sequence[RegionSample],
    space: LabelSpace,
    lam: float,
    mode: str = "full",
) -> tuple[LossBreakdown, Gradients]:
    """Mean batch loss and exact analytic gradients for W1 and the box head.

    The score-path gradient chains through the bilinear form:
    ``dW1 = (1/T) sum_i f_i (W2 dL/do_i)^T``.
    """
    if not batch:
        raise ConfigError("batch must be nonempty")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")

    n = len(batch)
    feats = np.stack([np.asarray(s.feature, dtype=np.float64) for s in batch])
    if feats.shape[1] != model.d_f:
        raise ShapeError(f"feature length {feats.shape[1]} != d_f {model.d_f}")
    scores = (feats @ model.w1) @ model.w2
    offsets = feats @ model.box_w + model.box_b

    g_scores = np.zeros_like(scores)
    d_offsets = np.zeros_like(offsets)
    mm_sum = mc_sum = reg_sum = 0.0
    n_pos = 0
    for i, sample in enumerate(batch):
        y = _check_target(sample.label, space)
        o = scores[i]
        if not np.isfinite(o).all():
            raise NumericFailureError("non-finite score", sample_index=i)
        l_mm, g_mm = _margin_terms(o, y, space, mode)
        if mode == "full":
            l_mc, g_mc = _cluster_terms(o, y, space)
            g_scores[i] = lam * g_mm + (1.0 - lam) * g_mc
        else:
            l_mc = 0.0
            g_scores[i] = g_mm
        mm_sum += l_mm
        mc_sum += l_mc
        if space.is_seen(y):
            if sample.gt_box is None:
                raise ConfigError(f"foreground sample {i} has no matched gt box")
            n_pos += 1
            target = encode_boxes(np.asarray(sample.gt_box), np.asarray(sample.box))
            sl = box_slice(y)
            diff = offsets[i, sl] - target
            reg_sum += float(smooth_l1(diff).sum())
            d_offsets[i, sl] = np.clip(diff, -1.0, 1.0)
        if not np.isfinite(g_scores[i]).all():
            raise NumericFailureError("non-finite gradient", sample_index=i)

    lam_eff = 1.0 if mode == "seen_only" else lam
    l_mm = mm_sum / n
    l_mc = mc_sum / n
    l_cls = lam_eff * l_mm + (1.0 - lam_eff) * l_mc
    l_reg = reg_sum / n_pos if n_pos else 0.0

    dw1 = feats.T @ (g_scores @ model.w2.T) / n
    if n_pos:
        dbox = feats.T @ d_offsets / n_pos
        dbox_b = d_offsets.sum(axis=0) / n_pos
    else:
        dbox = np.zeros_like(model.box_w)
        dbox_b = np.zeros_like(model.box_b)

    breakdown = LossBreakdown(l_mm, l_mc, l_cls, l_reg, l_cls + l_reg, lam_eff)
    return breakdown, Gradients(dw1=dw1, dbox=dbox, dbox_b=dbox_b)


def batch_loss(
    model: Model,
    batch: Sequence[RegionSample],
    space: LabelSpace,
    lam: float,
    mode: str = "full",
) -> float:
    """Mean batch loss only, matching :func:`loss_gradients` exactly.

    Used by finite-difference audits where recomputing gradients at every
    perturbation would dominate the runtime.
    """
    if not batch:
        raise ConfigError("batch must be nonempty")
    feats = np.stack([np.asarray(s.feature, dtype=np.float64) for s in batch])
    scores = (feats @ model.w1) @ model.w2
    offsets = None
    mm_sum = mc_sum = reg_sum = 0.0
    n_pos = 0
    for i, sample in enumerate(batch):
        y = _check_target(sample.label, space)
        mm_sum += _margin_value(scores[i], y, space, mode)
        if mode == "full":
            mc_sum += _cluster_value(scores[i], y, space)
        if space.is_seen(y):
            n_pos += 1
            if offsets is None:
                offsets = feats @ model.box_w + model.box_b
            target = encode_boxes(np.asarray(sample.gt_box), np.asarray(sample.box))
            reg_sum += float(smooth_l1(offsets[i, box_slice(y)] - target).sum())
    n = len(batch)
    lam_eff = 1.0 if mode == "seen_only" else lam
    l_cls = lam_eff * (mm_sum / n) + (1.0 - lam_eff) * (mc_sum / n)
    return l_cls + (reg_sum / n_pos if n_pos else 0.0)
