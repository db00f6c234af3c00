"""Semantic embeddings and label-space bookkeeping.

Class word vectors are ingested from a plain text file, L2-normalized, and
augmented with a background column defined as the arithmetic mean of the
normalized class vectors (the background is deliberately *not* renormalized).
The label space assigns contiguous 1-based ids: seen classes first, then
unseen classes, then the background id C+1.  Meta-classes partition the
classes; the background gets its own singleton meta-class M+1.

Both structures are immutable after construction and safe to share across
workers.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    CoverageError,
    DegenerateEmbeddingError,
    DimensionMismatchError,
    DisjointnessError,
    DuplicateLabelError,
    ParseError,
)

NORM_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EmbeddingTable:
    """Per-class semantic vectors, stored column-wise.

    ``vectors`` has shape (d, C); column order matches ``labels``.
    ``background`` is set by :func:`finalize_embeddings` and is None before.
    """

    labels: tuple[str, ...]
    vectors: np.ndarray
    background: np.ndarray | None = None
    finalized: bool = False
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {l: i for i, l in enumerate(self.labels)})
        if self.vectors.shape[1] != len(self.labels):
            raise DimensionMismatchError(
                f"{len(self.labels)} labels but {self.vectors.shape[1]} vector columns"
            )

    @property
    def d(self) -> int:
        return self.vectors.shape[0]

    @property
    def n_classes(self) -> int:
        return self.vectors.shape[1]

    def index(self, label: str) -> int:
        return self._index[label]

    def vector(self, label: str) -> np.ndarray:
        return self.vectors[:, self._index[label]]

    def w2(self) -> np.ndarray:
        """Fixed projection matrix, shape (d, C+1): class columns then background."""
        if not self.finalized:
            raise ValueError("table must be finalized before building W2")
        return _readonly(np.column_stack([self.vectors, self.background]))

    def column_norms(self) -> np.ndarray:
        """Norms of the C+1 columns of W2 (1.0 for classes, <=1 for background)."""
        return np.linalg.norm(self.w2(), axis=0)

    def reorder(self, labels: Sequence[str]) -> "EmbeddingTable":
        """New table with columns permuted into the given label order.

        The background is order-invariant (a mean), so it is carried over.
        """
        missing = [l for l in labels if l not in self._index]
        if missing:
            raise CoverageError(f"labels absent from embedding table: {missing}")
        if len(set(labels)) != len(labels) or len(labels) != len(self.labels):
            raise CoverageError("reorder labels must be a permutation of table labels")
        cols = [self._index[l] for l in labels]
        return EmbeddingTable(
            labels=tuple(labels),
            vectors=_readonly(self.vectors[:, cols]),
            background=self.background,
            finalized=self.finalized,
        )


def load_word_vectors(path: str | os.PathLike) -> EmbeddingTable:
    """Parse a word-vector text file: one ``label v1 ... vd`` record per line.

    Vectors are kept raw (un-normalized); call :func:`finalize_embeddings`
    before use.  Multi-token class names must use underscores.
    """
    labels: list[str] = []
    rows: list[np.ndarray] = []
    d: int | None = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            label, tokens = parts[0], parts[1:]
            if not tokens:
                raise ParseError(f"record {label!r} has no vector components", lineno)
            if label in labels:
                raise DuplicateLabelError(f"duplicate label {label!r}", lineno)
            try:
                vec = np.array([float(t) for t in tokens], dtype=np.float64)
            except ValueError as exc:
                raise ParseError(f"non-numeric token in record {label!r}: {exc}", lineno)
            if d is None:
                d = vec.size
            elif vec.size != d:
                raise DimensionMismatchError(
                    f"record {label!r} has {vec.size} components, expected {d}", lineno
                )
            labels.append(label)
            rows.append(vec)
    if not rows:
        raise ParseError(f"no records in {path}")
    return EmbeddingTable(labels=tuple(labels), vectors=_readonly(np.stack(rows, axis=1)))


def finalize_embeddings(table: EmbeddingTable) -> EmbeddingTable:
    """L2-normalize every class vector and set the background column.

    The background is the arithmetic mean of the normalized class vectors;
    by the triangle inequality its norm is <= 1 and it is left as-is.
    """
    norms = np.linalg.norm(table.vectors, axis=0)
    bad = np.where(~(norms > 0.0))[0]
    if bad.size:
        raise DegenerateEmbeddingError(
            f"class {table.labels[bad[0]]!r} has zero-norm vector"
        )
    vectors = table.vectors / norms
    background = vectors.mean(axis=1)
    return EmbeddingTable(
        labels=table.labels,
        vectors=_readonly(vectors),
        background=_readonly(background),
        finalized=True,
    )


@dataclass(frozen=True)
class LabelSpace:
    """Contiguous 1-based ids: seen 1..S, unseen S+1..S+U, background C+1.

    ``meta_of`` maps every class id (including bg) to its meta id; meta ids
    are 1..M in first-appearance order of the meta map, and the background
    owns the singleton meta-class M+1.
    """

    labels: tuple[str, ...]
    n_seen: int
    n_unseen: int
    meta_labels: tuple[str, ...]
    _meta_of: tuple[int, ...]

    @property
    def S(self) -> int:
        return self.n_seen

    @property
    def U(self) -> int:
        return self.n_unseen

    @property
    def C(self) -> int:
        return self.n_seen + self.n_unseen

    @property
    def bg_id(self) -> int:
        return self.C + 1

    @property
    def M(self) -> int:
        return len(self.meta_labels)

    @property
    def bg_meta_id(self) -> int:
        return self.M + 1

    @property
    def seen_ids(self) -> range:
        return range(1, self.n_seen + 1)

    @property
    def unseen_ids(self) -> range:
        return range(self.n_seen + 1, self.C + 1)

    def id_of(self, label: str) -> int:
        return self.labels.index(label) + 1

    def label_of(self, class_id: int) -> str:
        if class_id == self.bg_id:
            return "__background__"
        return self.labels[class_id - 1]

    def meta_label_of(self, meta_id: int) -> str:
        if meta_id == self.bg_meta_id:
            return "__background__"
        return self.meta_labels[meta_id - 1]

    def is_seen(self, class_id: int) -> bool:
        return 1 <= class_id <= self.n_seen

    def is_unseen(self, class_id: int) -> bool:
        return self.n_seen < class_id <= self.C

    def meta_of(self, class_id: int) -> int:
        if not 1 <= class_id <= self.bg_id:
            raise CoverageError(f"class id {class_id} outside 1..{self.bg_id}")
        return self._meta_of[class_id - 1]

    def members(self, meta_id: int) -> tuple[int, ...]:
        """Class ids belonging to a meta-class, ascending."""
        if meta_id == self.bg_meta_id:
            return (self.bg_id,)
        if not 1 <= meta_id <= self.M:
            raise CoverageError(f"meta id {meta_id} outside 1..{self.bg_meta_id}")
        return tuple(
            cid for cid in range(1, self.C + 1) if self._meta_of[cid - 1] == meta_id
        )

    def unseen_members(self, meta_id: int) -> tuple[int, ...]:
        return tuple(cid for cid in self.members(meta_id) if self.is_unseen(cid))


def load_meta_map(path: str | os.PathLike) -> dict[str, str]:
    """Parse the two-column ``class_label,meta_label`` CSV (no header)."""
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8", newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 columns, got {len(row)}", lineno)
            cls, meta = row[0].strip(), row[1].strip()
            if cls in mapping:
                raise CoverageError(f"class {cls!r} listed in more than one meta row")
            mapping[cls] = meta
    if not mapping:
        raise ParseError(f"no rows in meta map {path}")
    return mapping


def build_label_space(
    seen_labels: Sequence[str],
    unseen_labels: Sequence[str],
    meta_map: str | os.PathLike | Mapping[str, str],
) -> LabelSpace:
    """Assign ids (seen, then unseen, then bg) and populate the meta structure.

    ``meta_map`` is either a path to the CSV map or an in-memory mapping.
    Every class must appear exactly once; meta ids follow first appearance
    in the map's iteration order.
    """
    overlap = set(seen_labels) & set(unseen_labels)
    if overlap:
        raise DisjointnessError(f"labels in both seen and unseen sets: {sorted(overlap)}")
    if len(set(seen_labels)) != len(seen_labels) or len(set(unseen_labels)) != len(unseen_labels):
        raise DisjointnessError("duplicate labels inside a split set")
    if isinstance(meta_map, (str, os.PathLike)):
        meta_map = load_meta_map(meta_map)

    labels = tuple(seen_labels) + tuple(unseen_labels)
    missing = [l for l in labels if l not in meta_map]
    if missing:
        raise CoverageError(f"classes missing from meta map: {missing}")

    meta_order: list[str] = []
    for meta in meta_map.values():
        if meta not in meta_order:
            meta_order.append(meta)
    meta_ids = {m: i + 1 for i, m in enumerate(meta_order)}

    meta_of = tuple(meta_ids[meta_map[l]] for l in labels) + (len(meta_order) + 1,)
    return LabelSpace(
        labels=labels,
        n_seen=len(seen_labels),
        n_unseen=len(unseen_labels),
        meta_labels=tuple(meta_order),
        _meta_of=meta_of,
    )


def meta_cosine_stats(matrix: np.ndarray, space: LabelSpace) -> tuple[float, float]:
    """Mean intra-meta and inter-meta pairwise cosines of per-class columns.

    ``matrix`` has one column per class id 1..C (background excluded); used
    to quantify how strongly training pulls same-meta embeddings together.
    """
    if matrix.shape[1] != space.C:
        raise DimensionMismatchError(
            f"expected {space.C} columns, got {matrix.shape[1]}"
        )
    norms = np.linalg.norm(matrix, axis=0)
    if not np.all(norms > 0):
        raise DegenerateEmbeddingError("zero-norm column in modified embeddings")
    unit = matrix / norms
    cos = unit.T @ unit
    metas = np.array([space.meta_of(cid) for cid in range(1, space.C + 1)])
    same = metas[:, None] == metas[None, :]
    off_diag = ~np.eye(space.C, dtype=bool)
    intra_mask = same & off_diag
    inter_mask = ~same
    intra = float(cos[intra_mask].mean()) if intra_mask.any() else float("nan")
    inter = float(cos[inter_mask].mean()) if inter_mask.any() else float("nan")
    return intra, inter


def save_word_vectors(
    path: str | os.PathLike, labels: Iterable[str], vectors: np.ndarray
) -> None:
    """Write columns of ``vectors`` in the word-vector text format."""
    vectors = np.asarray(vectors, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as f:
        for j, label in enumerate(labels):
            coords = " ".join(repr(float(v)) for v in vectors[:, j])
            f.write(f"{label} {coords}\n")
