"""Similarity scoring, kNN edge selection and level-graph construction."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .core import EmbeddingSet, LevelGraph, SharcError, ensure_valid


class GraphError(SharcError, ValueError):
    pass


def similarity(features: np.ndarray) -> np.ndarray:
    """Cosine similarity mapped to [0, 1]: ``(cos + 1) / 2``, unit diagonal."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise GraphError(f"features must be 2-D, got shape {x.shape}")
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(~(norms > 0))
    if zero.size:
        raise GraphError(f"zero-norm (or non-finite) feature row {int(zero[0])}")
    u = x / norms[:, None]
    s = u @ u.T
    s = np.clip((s + 1.0) * 0.5, 0.0, 1.0)
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return s


class CosineBackend:
    """Default similarity backend; ignores representative indices."""

    def __call__(self, identity: np.ndarray, representative: np.ndarray) -> np.ndarray:
        return similarity(identity)


class PrecomputedBackend:
    """Serves a fixed level-0 similarity matrix (e.g. PLDA scores from disk).

    Identity features of merged nodes are always some level-0 embedding, so
    higher levels reuse the rows/columns of their representatives.
    """

    def __init__(self, matrix: np.ndarray):
        s = np.asarray(matrix, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise GraphError(f"similarity matrix must be square, got {s.shape}")
        if not np.isfinite(s).all() or s.min() < 0.0 or s.max() > 1.0:
            raise GraphError("similarity values must lie in [0, 1]")
        if not np.allclose(s, s.T, atol=1e-9, rtol=0):
            raise GraphError("similarity matrix is not symmetric")
        self.matrix = s

    def __call__(self, identity: np.ndarray, representative: np.ndarray) -> np.ndarray:
        rep = np.asarray(representative)
        if rep.max(initial=-1) >= self.matrix.shape[0]:
            raise GraphError("representative index outside precomputed matrix")
        s = self.matrix[np.ix_(rep, rep)].copy()
        np.fill_diagonal(s, 1.0)
        return s


SimilarityBackend = Callable[[np.ndarray, np.ndarray], np.ndarray]


def knn_edges(S: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Pick the ``min(k, n-1)`` most similar other nodes for every node.

    Ties go to the lower node index. Returns ``(neighbors, similarities)``,
    both of shape ``(n, deg)``, each row ordered by decreasing similarity.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise GraphError(f"similarity must be square, got shape {S.shape}")
    n = S.shape[0]
    if n == 0:
        raise GraphError("cannot build edges on an empty graph")
    if k < 1:
        raise GraphError(f"k must be >= 1, got {k}")
    deg = min(k, n - 1)
    if deg == 0:
        return np.zeros((n, 0), dtype=np.int64), np.zeros((n, 0))
    key = -S.copy()
    np.fill_diagonal(key, np.inf)
    if deg < n - 1 and n > 256:
        # Partition first, then stable-sort a widened candidate window so
        # boundary ties are resolved by index, not by partition order.
        part = np.argpartition(key, deg - 1, axis=1)[:, :deg]
        kth = np.take_along_axis(key, part, axis=1).max(axis=1, keepdims=True)
        nbrs = np.empty((n, deg), dtype=np.int64)
        for i in range(n):
            cand = np.flatnonzero(key[i] <= kth[i])
            order = np.argsort(key[i, cand], kind="stable")
            nbrs[i] = cand[order[:deg]]
    else:
        nbrs = np.argsort(key, axis=1, kind="stable")[:, :deg]
    return nbrs, np.take_along_axis(S, nbrs, axis=1)


def _make_graph(level, identity, average, representative, origin, k, backend) -> LevelGraph:
    S = backend(identity, representative)
    nbrs, sims = knn_edges(S, k)
    return LevelGraph(
        level=level,
        node_features=np.concatenate([identity, average], axis=1),
        neighbors=nbrs,
        edge_similarity=sims,
        node_origin=origin,
        representative=representative,
        k=k,
    )


def build_level0(
    es: EmbeddingSet, k: int, backend: Optional[SimilarityBackend] = None
) -> LevelGraph:
    """Level-0 graph: every embedding is its own cluster, features ``[X; X]``."""
    ensure_valid(es)
    backend = backend or CosineBackend()
    x = es.embeddings
    n = x.shape[0]
    return _make_graph(
        0, x, x, np.arange(n), [np.array([i]) for i in range(n)], k, backend
    )


def aggregate(
    graph: LevelGraph,
    clusters: np.ndarray,
    density: np.ndarray,
    backend: Optional[SimilarityBackend] = None,
) -> LevelGraph:
    """Collapse each cluster into one node of the next level.

    The identity feature of a cluster is the identity feature of its member
    with the highest density (lowest index on ties); the average feature is
    the mean of the members' identity features. Edges are rebuilt from the
    new identity features.
    """
    backend = backend or CosineBackend()
    clusters = np.asarray(clusters, dtype=np.int64)
    density = np.asarray(density, dtype=np.float64)
    n = graph.n
    if clusters.shape != (n,) or density.shape != (n,):
        raise GraphError("clusters and density need one entry per node")
    n_clusters = int(clusters.max()) + 1 if n else 0
    counts = np.bincount(clusters, minlength=n_clusters)
    if np.any(counts == 0):
        raise GraphError("empty cluster in assignment")

    # lexsort: primary cluster, then density descending, then node index.
    order = np.lexsort((np.arange(n), -density, clusters))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    peak = order[starts]

    ident = graph.identity
    sums = np.zeros((n_clusters, ident.shape[1]))
    np.add.at(sums, clusters, ident)
    average = sums / counts[:, None]
    identity = ident[peak]

    members = np.split(order, np.cumsum(counts)[:-1])
    origin = [np.sort(np.concatenate([graph.node_origin[j] for j in m])) for m in members]
    return _make_graph(
        graph.level + 1,
        identity,
        average,
        graph.representative[peak],
        origin,
        graph.k,
        backend,
    )
