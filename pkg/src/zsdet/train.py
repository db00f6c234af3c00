"""Adam training of the projection and box head over per-image mini-batches.

Each epoch walks the images in dataset order, drawing one mini-batch per
image: up to ``n_pos`` foreground and ``n_neg`` background proposals,
without replacement when the pool is large enough, with replacement
(repetition) otherwise.  The whole run is bit-reproducible from the config
seed; W2 is read-only and verified untouched by tests.

Loss averaging: the classification term is averaged over all batch samples,
the regression term over foreground samples only.  Rebalancing runs once,
up front, before any optimization step.
"""

from __future__ import annotations

import csv
import os
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, ImageRecord, Proposal
from .errors import ConfigError, InvalidTargetError, NumericFailureError
from .evaluation import GroundTruth, iou
from .loss import MODES, LossBreakdown, loss_gradients
from .model import Model, RegionSample, init_model
from .semantics import LabelSpace


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters.

    ``lam`` weights the margin loss against the clustering loss; ``mode``
    selects full (seen+unseen+bg) or seen-only margin training.  Defaults
    follow the full-scale reference protocol (lr 1e-5, betas 0.9/0.999,
    16+16 proposals per image); desk-scale runs typically raise ``lr``.
    """

    lam: float = 0.8
    mode: str = "full"
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_pos: int = 16
    n_neg: int = 16
    epochs: int = 10
    seed: int = 0
    min_similar: int = 200
    fg_iou: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("betas must be in (0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.n_pos < 0 or self.n_neg < 0:
            raise ConfigError("proposal counts must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.min_similar < 0:
            raise ConfigError("min_similar must be >= 0")
        if not 0.0 < self.fg_iou <= 1.0:
            raise ConfigError("fg_iou must be in (0, 1]")


@dataclass
class AdamState:
    """First/second moment accumulators per parameter plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Standard bias-corrected Adam update, applied in place elementwise."""
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ConfigError(f"gradient shape {g.shape} != param shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericFailureError(f"non-finite gradient for {key!r}")
        state.m[key] = b1 * state.m[key] + (1.0 - b1) * g
        state.v[key] = b2 * state.v[key] + (1.0 - b2) * g * g
        m_hat = state.m[key] / (1.0 - b1**state.t)
        v_hat = state.v[key] / (1.0 - b2**state.t)
        p -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return params, state


def label_proposals(
    proposals: Sequence[Proposal],
    gts: Sequence[GroundTruth],
    fg_iou: float,
    space: LabelSpace,
    image_id: str = "",
) -> list[RegionSample]:
    """Assign each proposal the class of its max-IoU ground truth.

    A proposal is foreground iff its best IoU is >= ``fg_iou`` (boundary
    inclusive); background samples carry no regression target.
    """
    samples = []
    for prop in proposals:
        best_iou, best = 0.0, None
        for gt in gts:
            overlap = iou(prop.box, gt.box)
            if overlap > best_iou or best is None:
                best_iou, best = overlap, gt
        if best is not None and best_iou >= fg_iou:
            samples.append(
                RegionSample(
                    feature=prop.feature,
                    box=prop.box,
                    label=best.label,
                    image_id=image_id,
                    gt_box=best.box,
                )
            )
        else:
            samples.append(
                RegionSample(
                    feature=prop.feature,
                    box=prop.box,
                    label=space.bg_id,
                    image_id=image_id,
                )
            )
    return samples


def _draw(pool: list, n: int, rng: np.random.Generator) -> list:
    if n <= 0 or not pool:
        return []
    replace = len(pool) < n
    idx = rng.choice(len(pool), size=n, replace=replace)
    return [pool[int(i)] for i in idx]


def compose_batch(
    image_samples: Sequence[RegionSample],
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
    bg_id: int,
) -> list[RegionSample]:
    """Sample a per-image batch: n_pos foreground plus n_neg background.

    Short pools repeat samples (draw with replacement); an empty pool
    contributes nothing.  Returns [] for an image without proposals.
    """
    if not image_samples:
        return []
    fg = [s for s in image_samples if s.label != bg_id]
    bg = [s for s in image_samples if s.label == bg_id]
    return _draw(fg, n_pos, rng) + _draw(bg, n_neg, rng)


def rebalance_dataset(
    dataset: Dataset,
    space: LabelSpace,
    min_similar: int,
    rng: np.random.Generator,
) -> Dataset:
    """Repetition augmentation: balance per-meta foreground instance counts.

    For every meta-class holding an unseen class, the pool of seen-class
    instances sharing that meta is grown to at least ``min_similar`` by
    duplicating pool images (uniform, with replacement) or shrunk to exactly
    ``min_similar`` by removing a uniform subset of instances; instances
    removed this way simply become background at labeling time.  Meta-classes
    are processed in id order against the working set, so every retained
    sample exists in the original dataset.
    """
    if min_similar <= 0:
        return dataset
    images = list(dataset.images)
    n_copies = 0
    for mid in range(1, space.M + 1):
        if not space.unseen_members(mid):
            continue
        seen_m = {
            space.label_of(cid) for cid in space.members(mid) if space.is_seen(cid)
        }
        if not seen_m:
            warnings.warn(
                f"meta-class {space.meta_label_of(mid)!r} has no seen members; "
                "its unseen classes stay unsupported"
            )
            continue
        instances = [
            (ii, gi)
            for ii, img in enumerate(images)
            for gi, gt in enumerate(img.gts)
            if gt.label in seen_m
        ]
        count = len(instances)
        if count == 0:
            warnings.warn(
                f"meta-class {space.meta_label_of(mid)!r} has no seen instances; "
                "its unseen classes stay unsupported"
            )
            continue
        if count < min_similar:
            pool = sorted({ii for ii, _ in instances})
            pool_counts = {
                ii: sum(1 for jj, _ in instances if jj == ii) for ii in pool
            }
            while count < min_similar:
                pick = pool[int(rng.integers(len(pool)))]
                src = images[pick]
                n_copies += 1
                images.append(
                    ImageRecord(
                        image_id=f"{src.image_id}~r{n_copies}",
                        proposals=src.proposals,
                        gts=list(src.gts),
                    )
                )
                count += pool_counts[pick]
        elif count > min_similar:
            keep = set(
                int(i) for i in rng.choice(count, size=min_similar, replace=False)
            )
            drop: dict[int, set[int]] = {}
            for pos, (ii, gi) in enumerate(instances):
                if pos not in keep:
                    drop.setdefault(ii, set()).add(gi)
            for ii, gone in drop.items():
                img = images[ii]
                images[ii] = ImageRecord(
                    image_id=img.image_id,
                    proposals=img.proposals,
                    gts=[gt for gi, gt in enumerate(img.gts) if gi not in gone],
                )
    return Dataset(d_f=dataset.d_f, labels=dataset.labels, images=images)


def train(
    dataset: Dataset,
    table,
    space: LabelSpace,
    config: TrainConfig,
) -> tuple[Model, list[LossBreakdown]]:
    """Full training loop; deterministic given (dataset, config, seed)."""
    unseen_names = {space.label_of(cid) for cid in space.unseen_ids}
    for img in dataset.images:
        for gt in img.gts:
            if gt.label in unseen_names:
                raise InvalidTargetError(
                    f"train dataset leaks unseen class {gt.label!r} "
                    f"in image {img.image_id}"
                )

    model = init_model(config, table, space, d_f=dataset.d_f, seed=config.seed)
    work = rebalance_dataset(
        dataset, space, config.min_similar, np.random.default_rng([config.seed, 1])
    )
    labeled = []
    for img in work.images:
        gts = [GroundTruth(img.image_id, space.id_of(gt.label), gt.box) for gt in img.gts]
        labeled.append(
            label_proposals(img.proposals, gts, config.fg_iou, space, img.image_id)
        )

    params = {"w1": model.w1, "box_w": model.box_w, "box_b": model.box_b}
    state = AdamState.for_params(params)
    rng = np.random.default_rng([config.seed, 2])
    history: list[LossBreakdown] = []
    step = 0
    for _ in range(config.epochs):
        for samples in labeled:
            batch = compose_batch(samples, config.n_pos, config.n_neg, rng, space.bg_id)
            if not batch:
                continue
            try:
                breakdown, grads = loss_gradients(
                    model, batch, space, config.lam, config.mode
                )
                adam_step(
                    params,
                    {"w1": grads.dw1, "box_w": grads.dbox, "box_b": grads.dbox_b},
                    state,
                    config,
                )
            except NumericFailureError as exc:
                raise NumericFailureError(f"training step {step}: {exc}") from exc
            history.append(breakdown)
            step += 1
    return model, history


def write_loss_history(
    history: Sequence[LossBreakdown], path: str | os.PathLike
) -> None:
    """CSV emitted beside the checkpoint: step,l_mm,l_mc,l_cls,l_reg,total."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "l_mm", "l_mc", "l_cls", "l_reg", "total"])
        for i, b in enumerate(history):
            writer.writerow([i, repr(b.l_mm), repr(b.l_mc), repr(b.l_cls), repr(b.l_reg), repr(b.total)])
