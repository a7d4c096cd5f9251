"""Domain types shared across the package.

Every container here is a frozen dataclass whose numpy arrays are marked
read-only on construction, so instances can be shared between threads.
Invariant checking is explicit (``validate`` / ``check_level_graph``); the
constructors only normalise dtypes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class SharcError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SharcError, ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _frozen(a, dtype) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EmbeddingSet:
    """Segment embeddings of one recording.

    Attributes:
        recording_id: Name of the recording, used in RTTM output.
        embeddings: ``(N, F)`` float64 matrix, one row per segment.
        segments: ``(N, 2)`` array of ``(onset, duration)`` in seconds, or None.
        labels: ``(N,)`` integer speaker ids, present for training data only.
    """

    recording_id: str
    embeddings: np.ndarray
    segments: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim == 1:
            emb = emb.reshape(1, -1)
        object.__setattr__(self, "embeddings", _frozen(emb, np.float64))
        if self.segments is not None:
            segs = np.asarray(self.segments, dtype=np.float64)
            if segs.size == 0:
                segs = segs.reshape(0, 2)
            object.__setattr__(self, "segments", _frozen(segs, np.float64))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(self.labels, np.int64))

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1] if self.embeddings.ndim == 2 else 0


def validate(es: EmbeddingSet) -> list[str]:
    """Return the list of violated invariants; an empty list means ok."""
    problems = []
    emb = es.embeddings
    if emb.ndim != 2:
        return [f"embeddings must be 2-D, got shape {emb.shape}"]
    n, f = emb.shape
    if n < 1:
        problems.append("embedding set is empty (N = 0)")
    if f < 1:
        problems.append("embedding dimension is zero (F = 0)")
    bad_rows = np.flatnonzero(~np.isfinite(emb).all(axis=1))
    if bad_rows.size:
        problems.append(f"non-finite values in rows {bad_rows.tolist()}")
    if es.segments is not None:
        segs = es.segments
        if segs.ndim != 2 or segs.shape[1] != 2:
            problems.append(f"segments must have shape (N, 2), got {segs.shape}")
        else:
            if segs.shape[0] != n:
                problems.append(f"segment count {segs.shape[0]} does not match N = {n}")
            if not np.isfinite(segs).all():
                problems.append("non-finite segment times")
            neg = np.flatnonzero(segs[:, 1] < 0)
            if neg.size:
                problems.append(f"negative durations in segments {neg.tolist()}")
    if es.labels is not None:
        if es.labels.shape != (n,):
            problems.append(f"label count {es.labels.size} does not match N = {n}")
    return problems


def ensure_valid(es: EmbeddingSet) -> EmbeddingSet:
    problems = validate(es)
    if problems:
        raise ValidationError([f"{es.recording_id}: {p}" for p in problems])
    return es


@dataclass(frozen=True)
class LevelGraph:
    """One level of the clustering hierarchy.

    Edges are stored as a dense ``(n, deg)`` neighbour table because every
    node has the same out-degree ``deg = min(k, n - 1)``. Row ``i`` of
    ``neighbors`` lists the targets of node ``i`` in decreasing similarity.

    Attributes:
        level: Hierarchy level ``m``.
        node_features: ``(n, 2F)``; identity feature followed by average feature.
        neighbors: ``(n, deg)`` int64 target indices.
        edge_similarity: ``(n, deg)`` similarities of the edges, in [0, 1].
        node_origin: For every node, sorted level-0 indices it stands for.
        representative: Level-0 index whose embedding is the identity feature.
    """

    level: int
    node_features: np.ndarray
    neighbors: np.ndarray
    edge_similarity: np.ndarray
    node_origin: tuple
    representative: np.ndarray
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "node_features", _frozen(self.node_features, np.float64))
        nb = np.asarray(self.neighbors, dtype=np.int64).reshape(self.node_features.shape[0], -1)
        object.__setattr__(self, "neighbors", _frozen(nb, np.int64))
        es = np.asarray(self.edge_similarity, dtype=np.float64).reshape(nb.shape)
        object.__setattr__(self, "edge_similarity", _frozen(es, np.float64))
        object.__setattr__(
            self, "node_origin", tuple(_frozen(o, np.int64) for o in self.node_origin)
        )
        object.__setattr__(self, "representative", _frozen(self.representative, np.int64))

    @property
    def n(self) -> int:
        return self.node_features.shape[0]

    @property
    def feature_dim(self) -> int:
        """Embedding dimension ``F`` (half the node feature width)."""
        return self.node_features.shape[1] // 2

    @property
    def degree(self) -> int:
        return self.neighbors.shape[1]

    @property
    def identity(self) -> np.ndarray:
        return self.node_features[:, : self.feature_dim]

    @property
    def src(self) -> np.ndarray:
        return np.repeat(np.arange(self.n), self.degree)

    @property
    def dst(self) -> np.ndarray:
        return self.neighbors.ravel()

    @property
    def edges(self) -> np.ndarray:
        """``(E, 2)`` array of directed ``(src, dst)`` pairs, row-major by source."""
        return np.stack([self.src, self.dst], axis=1)

    @property
    def n_edges(self) -> int:
        return self.neighbors.size


def check_level_graph(g: LevelGraph, n_total: Optional[int] = None) -> list[str]:
    """Invariant violations of a level graph (empty list when sound)."""
    problems = []
    n = g.n
    expected_deg = min(g.k, n - 1) if g.k else g.degree
    if g.degree != expected_deg:
        problems.append(f"out-degree {g.degree} != min(k, n-1) = {expected_deg}")
    if g.degree:
        if np.any(g.neighbors == np.arange(n)[:, None]):
            problems.append("self-loop present")
        if g.neighbors.min() < 0 or g.neighbors.max() >= n:
            problems.append("neighbor index out of range")
        for i, row in enumerate(g.neighbors):
            if np.unique(row).size != row.size:
                problems.append(f"duplicate edge from node {i}")
                break
    es = g.edge_similarity
    if es.size and (es.min() < 0.0 or es.max() > 1.0 or not np.isfinite(es).all()):
        problems.append("edge similarity outside [0, 1]")
    if len(g.node_origin) != n:
        problems.append("node_origin length differs from node count")
    else:
        allo = np.concatenate(g.node_origin) if n else np.empty(0, np.int64)
        if np.unique(allo).size != allo.size:
            problems.append("node_origin sets overlap")
        if n_total is not None and (allo.size != n_total or set(allo.tolist()) != set(range(n_total))):
            problems.append("node_origin does not cover all level-0 indices")
        for i, (o, r) in enumerate(zip(g.node_origin, g.representative)):
            if r not in o:
                problems.append(f"representative of node {i} not in its origin set")
                break
    return problems


@dataclass(frozen=True)
class EdgeScores:
    """Model outputs for one level graph, shaped like ``LevelGraph.neighbors``.

    ``edge_weight`` is derived as ``2 * linkage_prob - 1``; ``density`` may be
    None when only linkage probabilities have been computed.
    """

    linkage_prob: np.ndarray
    edge_weight: np.ndarray = None
    density: Optional[np.ndarray] = None

    def __post_init__(self):
        p = _frozen(self.linkage_prob, np.float64)
        object.__setattr__(self, "linkage_prob", p)
        if self.edge_weight is None:
            object.__setattr__(self, "edge_weight", _frozen(2.0 * p - 1.0, np.float64))
        else:
            object.__setattr__(self, "edge_weight", _frozen(self.edge_weight, np.float64))
        if self.density is not None:
            object.__setattr__(self, "density", _frozen(self.density, np.float64))


def dense_relabel(labels) -> np.ndarray:
    """Map arbitrary ids to 0..C-1, ordered by first occurrence."""
    labels = np.asarray(labels)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first, kind="stable"), kind="stable")
    return order[inverse].astype(np.int64)


@dataclass(frozen=True)
class Hierarchy:
    """Result of inference.

    ``levels[m]`` pairs the graph of level ``m`` with the cluster id each of
    its nodes received. ``final_labels`` gives each level-0 embedding the id
    of its top-level cluster.
    """

    levels: tuple
    final_labels: np.ndarray
    stopped_by: str = ""

    @property
    def depth(self) -> int:
        """Number of levels at which at least one merge happened."""
        return sum(1 for g, a in self.levels if a.max(initial=-1) + 1 < g.n)

    def compose(self) -> np.ndarray:
        """Recompute final labels by chaining the per-level assignments."""
        if not self.levels:
            return np.zeros(0, dtype=np.int64)
        g0 = self.levels[0][0]
        lab = np.arange(g0.n)
        for _, assign in self.levels:
            lab = assign[lab]
        return dense_relabel(lab)


@dataclass
class Dims:
    """Layer widths of the scorer: SAGE output and the two hidden FFN layers."""

    sage: int = 64
    hidden1: int = 32
    hidden2: int = 32

    def as_tuple(self) -> tuple:
        return (self.sage, self.hidden1, self.hidden2)


# Full-size network, for real x-vector corpora.
LARGE_DIMS = Dims(2048, 1024, 1024)
