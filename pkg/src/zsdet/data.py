"""Dataset files, the seen/unseen split protocol, and the synthetic generator.

The generator replaces the convolutional backbone with a known linear map G
from semantic space to feature space: a positive proposal's feature is
``G v_y`` plus isotropic noise, so score-based recognition is identifiable
by construction and features of unseen classes stay related to those of
same-meta seen classes.  Ground-truth boxes live on a 3x3 grid; each
positive proposal is its object's cell under a bounded random translation,
and the remaining proposals are background (noise features, random boxes).

Dataset files are JSON-lines: a header ``{"d_f": ..., "labels": [...]}``
followed by one image per line.  Proposals are stored unlabeled; training
assigns labels by IoU against the ground truths.
"""

from __future__ import annotations

import json
import os
import warnings
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, CoverageError, DimensionMismatchError, ParseError
from .evaluation import GroundTruth
from .semantics import EmbeddingTable, LabelSpace, _readonly

CANVAS = 256.0
GRID = 3
MIN_BG_BOX = 20.0


@dataclass
class Proposal:
    """Unlabeled region proposal: feature vector plus box."""

    feature: np.ndarray
    box: np.ndarray


@dataclass
class Annotation:
    """Ground-truth box with its class label (string; ids are assigned later)."""

    label: str
    box: np.ndarray


@dataclass
class ImageRecord:
    image_id: str
    proposals: list[Proposal]
    gts: list[Annotation]


@dataclass
class Dataset:
    d_f: int
    labels: tuple[str, ...]
    images: list[ImageRecord]

    def class_stats(self) -> dict[str, int]:
        """Ground-truth instances per class, covering all header labels."""
        counts = Counter(gt.label for img in self.images for gt in img.gts)
        return {label: counts.get(label, 0) for label in self.labels}


@dataclass(frozen=True)
class SynthConfig:
    """Knobs for the synthetic generator; see the module docstring."""

    s: int = 20
    u: int = 5
    m: int = 5
    d: int = 16
    d_f: int = 16
    images: int = 200
    test_images: int = 50
    proposals_per_image: int = 16
    noise_sigma: float = 0.1
    meta_spread: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.u < 1:
            raise ConfigError("need at least one unseen class")
        if self.s < 1:
            raise ConfigError("need at least one seen class")
        if not 1 <= self.m <= self.s + self.u:
            raise ConfigError("meta-class count must be in 1..S+U")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if self.meta_spread < 0:
            raise ConfigError("meta_spread must be >= 0")
        if min(self.d, self.d_f) < 2:
            raise ConfigError("dimensionalities must be >= 2")
        if min(self.images, self.test_images, self.proposals_per_image) < 1:
            raise ConfigError("images, test_images, proposals_per_image must be >= 1")


@dataclass
class SyntheticBundle:
    """Everything the generator emits, including the latent oracle record."""

    table: EmbeddingTable
    meta_map: dict[str, str]
    train: Dataset
    test: Dataset
    oracle: dict


def _grid_cell(idx: int) -> np.ndarray:
    cell = CANVAS / GRID
    r, c = divmod(idx, GRID)
    return np.array([c * cell, r * cell, (c + 1) * cell, (r + 1) * cell])


def _make_image(
    image_id: str,
    class_ids: np.ndarray,
    labels: Sequence[str],
    g_map: np.ndarray,
    vectors: np.ndarray,
    bg_scale: float,
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> ImageRecord:
    cell = CANVAS / GRID
    cells = rng.choice(GRID * GRID, size=class_ids.size, replace=False)
    proposals: list[Proposal] = []
    gts: list[Annotation] = []
    for cid, cell_idx in zip(class_ids, cells):
        gt_box = _grid_cell(int(cell_idx))
        feature = g_map @ vectors[:, cid - 1] + cfg.noise_sigma * rng.standard_normal(
            cfg.d_f
        )
        shift = rng.uniform(-0.2, 0.2, size=2) * cell
        prop_box = gt_box + np.array([shift[0], shift[1], shift[0], shift[1]])
        gts.append(Annotation(label=labels[cid - 1], box=gt_box))
        proposals.append(Proposal(feature=feature, box=prop_box))
    for _ in range(cfg.proposals_per_image - class_ids.size):
        feature = cfg.noise_sigma * bg_scale * rng.standard_normal(cfg.d_f)
        x1 = rng.uniform(0.0, CANVAS - MIN_BG_BOX)
        y1 = rng.uniform(0.0, CANVAS - MIN_BG_BOX)
        w = rng.uniform(MIN_BG_BOX, CANVAS / 2)
        h = rng.uniform(MIN_BG_BOX, CANVAS / 2)
        box = np.array([x1, y1, min(x1 + w, CANVAS), min(y1 + h, CANVAS)])
        proposals.append(Proposal(feature=feature, box=box))
    return ImageRecord(image_id=image_id, proposals=proposals, gts=gts)


def generate_synthetic(cfg: SynthConfig) -> SyntheticBundle:
    """Build embeddings, meta map, train/test datasets, and the oracle record.

    Classes are assigned to meta-classes round-robin so every meta-class
    mixes seen and unseen members whenever counts allow.  The train set
    contains no unseen instances (hard-checked); every test image holds at
    least one unseen instance.
    """
    rng = np.random.default_rng(cfg.seed)
    n_classes = cfg.s + cfg.u
    labels = tuple(f"class{i:03d}" for i in range(1, n_classes + 1))
    meta_labels = tuple(f"meta{j:02d}" for j in range(1, cfg.m + 1))
    meta_map = {labels[i]: meta_labels[i % cfg.m] for i in range(n_classes)}

    centroids = rng.standard_normal((cfg.d, cfg.m))
    centroids /= np.linalg.norm(centroids, axis=0)
    raw = np.empty((cfg.d, n_classes))
    for i in range(n_classes):
        v = centroids[:, i % cfg.m] + cfg.meta_spread * rng.standard_normal(cfg.d)
        raw[:, i] = v / np.linalg.norm(v)
    vectors = _readonly(raw)
    background = _readonly(raw.mean(axis=1))
    table = EmbeddingTable(
        labels=labels, vectors=vectors, background=background, finalized=True
    )

    g_map = rng.standard_normal((cfg.d_f, cfg.d)) / np.sqrt(cfg.d)
    bg_scale = float(
        np.sqrt(np.mean(np.linalg.norm(g_map @ vectors, axis=0) ** 2)) / np.sqrt(cfg.d_f)
    )

    objects = min(max(1, cfg.proposals_per_image // 4), GRID * GRID)
    seen_ids = np.arange(1, cfg.s + 1)
    unseen_ids = np.arange(cfg.s + 1, n_classes + 1)
    all_ids = np.arange(1, n_classes + 1)

    train_images = [
        _make_image(
            f"train{i:04d}",
            rng.choice(seen_ids, size=objects, replace=True),
            labels,
            g_map,
            vectors,
            bg_scale,
            cfg,
            rng,
        )
        for i in range(cfg.images)
    ]
    test_images = []
    for i in range(cfg.test_images):
        first = rng.choice(unseen_ids, size=1)
        rest = rng.choice(all_ids, size=objects - 1, replace=True) if objects > 1 else []
        test_images.append(
            _make_image(
                f"test{i:04d}",
                np.concatenate([first, rest]).astype(int) if objects > 1 else first,
                labels,
                g_map,
                vectors,
                bg_scale,
                cfg,
                rng,
            )
        )

    train = Dataset(d_f=cfg.d_f, labels=labels, images=train_images)
    test = Dataset(d_f=cfg.d_f, labels=labels, images=test_images)

    unseen_set = set(labels[cfg.s :])
    leaked = [
        gt.label for img in train.images for gt in img.gts if gt.label in unseen_set
    ]
    if leaked:
        raise AssertionError(f"unseen labels leaked into the train set: {leaked[:5]}")

    oracle = {
        "seen_labels": list(labels[: cfg.s]),
        "unseen_labels": list(labels[cfg.s :]),
        "meta_of": meta_map,
        "g_map": g_map.tolist(),
        "bg_feature_scale": bg_scale,
        "canvas": CANVAS,
        "objects_per_image": objects,
        "config": asdict(cfg),
    }
    return SyntheticBundle(
        table=table, meta_map=meta_map, train=train, test=test, oracle=oracle
    )


def propose_split(
    class_stats: Mapping[str, int],
    meta_map: Mapping[str, str],
    per_meta: str | int = "auto",
    rng: np.random.Generator | None = None,
    exclude: Sequence[str] = (),
) -> tuple[list[str], list[str]]:
    """Pick unseen classes from the rare half of each meta-class.

    ``per_meta='auto'`` draws two candidates from meta-classes with nine or
    more members and one otherwise; an explicit 1 or 2 forces that count.
    Eligibility is the rarest floor(n/2) members by instance count, with
    ties at the boundary count also eligible.  Meta-classes named in
    ``exclude`` (or with fewer than two members) contribute no unseen class.
    Returned lists preserve the meta map's class order.
    """
    if not class_stats and not meta_map:
        raise ConfigError("empty class statistics")
    if isinstance(per_meta, int) and per_meta not in (1, 2):
        raise ConfigError(f"per_meta must be 'auto', 1, or 2, got {per_meta}")
    rng = np.random.default_rng() if rng is None else rng

    by_meta: dict[str, list[str]] = {}
    for cls, meta in meta_map.items():
        by_meta.setdefault(meta, []).append(cls)

    unseen: set[str] = set()
    for meta, members in by_meta.items():
        if meta in exclude:
            continue
        if len(members) < 2:
            warnings.warn(
                f"meta-class {meta!r} has fewer than two members; no unseen pick"
            )
            continue
        n_pick = (
            (2 if len(members) >= 9 else 1) if per_meta == "auto" else int(per_meta)
        )
        n_pick = min(n_pick, len(members) - 1)
        ranked = sorted(members, key=lambda c: (class_stats.get(c, 0), c))
        boundary = class_stats.get(ranked[len(members) // 2 - 1], 0)
        pool = [c for c in ranked if class_stats.get(c, 0) <= boundary]
        n_pick = min(n_pick, len(pool))
        picks = rng.choice(len(pool), size=n_pick, replace=False)
        unseen.update(pool[int(i)] for i in picks)

    ordered = list(meta_map.keys())
    return [c for c in ordered if c not in unseen], [c for c in ordered if c in unseen]


def save_dataset(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write the JSON-lines dataset format (header line, then one image/line)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"d_f": dataset.d_f, "labels": list(dataset.labels)}) + "\n")
        for img in dataset.images:
            rec = {
                "image_id": img.image_id,
                "proposals": [
                    {"feature": p.feature.tolist(), "box": [float(v) for v in p.box]}
                    for p in img.proposals
                ],
                "gts": [
                    {"label": gt.label, "box": [float(v) for v in gt.box]}
                    for gt in img.gts
                ],
            }
            f.write(json.dumps(rec) + "\n")


def _require(rec: Mapping, key: str, lineno: int):
    if key not in rec:
        raise ParseError(f"missing field {key!r}", lineno)
    return rec[key]


def load_dataset(path: str | os.PathLike) -> Dataset:
    """Round-trip reader for :func:`save_dataset`; validates dimensions."""
    with open(path, encoding="utf-8") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad header: {exc}", 1)
        d_f = _require(header, "d_f", 1)
        labels = tuple(_require(header, "labels", 1))
        images: list[ImageRecord] = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad image record: {exc}", lineno)
            proposals = []
            for p in _require(rec, "proposals", lineno):
                feature = np.asarray(_require(p, "feature", lineno), dtype=np.float64)
                if feature.size != d_f:
                    raise DimensionMismatchError(
                        f"feature length {feature.size} != header d_f {d_f}", lineno
                    )
                box = np.asarray(_require(p, "box", lineno), dtype=np.float64)
                proposals.append(Proposal(feature=feature, box=box))
            gts = []
            for g in _require(rec, "gts", lineno):
                gts.append(
                    Annotation(
                        label=str(_require(g, "label", lineno)),
                        box=np.asarray(_require(g, "box", lineno), dtype=np.float64),
                    )
                )
            images.append(
                ImageRecord(
                    image_id=str(_require(rec, "image_id", lineno)),
                    proposals=proposals,
                    gts=gts,
                )
            )
    return Dataset(d_f=int(d_f), labels=labels, images=images)


def save_split(
    seen: Sequence[str], unseen: Sequence[str], path: str | os.PathLike
) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("seen: " + ",".join(seen) + "\n")
        f.write("unseen: " + ",".join(unseen) + "\n")


def load_split(path: str | os.PathLike) -> tuple[list[str], list[str]]:
    """Read a split file; also accepts a JSON record with seen/unseen lists."""
    with open(path, encoding="utf-8") as f:
        text = f.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        rec = json.loads(text)
        try:
            return list(rec["seen_labels"]), list(rec["unseen_labels"])
        except KeyError as exc:
            raise ParseError(f"JSON split record missing {exc}")
    seen: list[str] | None = None
    unseen: list[str] | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("seen:"):
            seen = [t for t in line[len("seen:") :].strip().split(",") if t]
        elif line.startswith("unseen:"):
            unseen = [t for t in line[len("unseen:") :].strip().split(",") if t]
        else:
            raise ParseError("expected 'seen:' or 'unseen:' prefix", lineno)
    if seen is None or unseen is None:
        raise ParseError("split file must define both seen and unseen lines")
    return seen, unseen


def save_meta_map(meta_map: Mapping[str, str], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for cls, meta in meta_map.items():
            f.write(f"{cls},{meta}\n")


def ground_truth_records(dataset: Dataset, space: LabelSpace) -> list[GroundTruth]:
    """Flatten a dataset's annotations into id-labeled ground-truth records."""
    out = []
    for img in dataset.images:
        for gt in img.gts:
            if gt.label not in space.labels:
                raise CoverageError(f"gt label {gt.label!r} not in label space")
            out.append(GroundTruth(img.image_id, space.id_of(gt.label), gt.box))
    return out
