"""Hierarchical inference: score, pick merge edges, take components, aggregate."""

from __future__ import annotations

import logging
from typing import Callable, Optional, Union

import numpy as np

from .core import EdgeScores, EmbeddingSet, Hierarchy, LevelGraph, dense_relabel
from .gnn import ScorerParams, edge_weights, node_density, score_graph
from .simgraph import SimilarityBackend, aggregate, build_level0

logger = logging.getLogger(__name__)

DEFAULT_MAX_LEVELS = 15

Scorer = Union[ScorerParams, Callable[[LevelGraph], EdgeScores]]


def candidate_set(graph: LevelGraph, scores: EdgeScores, p_tau: float) -> np.ndarray:
    """Boolean ``(n, deg)`` mask over the neighbour table.

    Entry ``(i, s)`` is set when the neighbour ``j = neighbors[i, s]`` has
    density at least that of ``i`` and ``p_ij >= p_tau``.
    """
    d = np.asarray(scores.density)
    p = np.asarray(scores.linkage_prob).reshape(graph.neighbors.shape)
    if graph.degree == 0:
        return np.zeros(graph.neighbors.shape, dtype=bool)
    return (d[:, None] <= d[graph.neighbors]) & (p >= p_tau)


def candidate_lists(graph: LevelGraph, mask: np.ndarray) -> list:
    return [graph.neighbors[i][mask[i]] for i in range(graph.n)]


def select_merges(graph: LevelGraph, mask: np.ndarray, scores: EdgeScores) -> np.ndarray:
    """One merge edge per node with candidates: the largest edge weight wins,
    the lower target index on ties. Returns an ``(E', 2)`` array."""
    if mask.size == 0 or not mask.any():
        return np.zeros((0, 2), dtype=np.int64)
    e = np.asarray(scores.edge_weight).reshape(mask.shape)
    masked = np.where(mask, e, -np.inf)
    best = masked.max(axis=1, keepdims=True)
    tie = mask & (masked == best)
    big = np.iinfo(np.int64).max
    target = np.where(tie, graph.neighbors, big).min(axis=1)
    rows = np.flatnonzero(mask.any(axis=1))
    return np.stack([rows, target[rows]], axis=1).astype(np.int64)


def components(merge_edges: np.ndarray, n: int) -> np.ndarray:
    """Undirected connected components; ids ordered by smallest member."""
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in np.asarray(merge_edges, dtype=np.int64).reshape(-1, 2):
        ra, rb = find(int(a)), find(int(b))
        if ra != rb:
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb
    roots = np.fromiter((find(i) for i in range(n)), dtype=np.int64, count=n)
    return dense_relabel(roots)


def oracle_scores(graph: LevelGraph, labels: np.ndarray) -> EdgeScores:
    """Ground-truth scores: ``p_ij = 1`` iff both ends carry the same label.

    Node labels come from each node's representative embedding, which is
    exact whenever origin sets are label-pure.
    """
    node_lab = np.asarray(labels)[graph.representative]
    q = (node_lab[:, None] == node_lab[graph.neighbors]).astype(np.float64)
    e = edge_weights(q)
    return EdgeScores(q, e, node_density(e, graph))


def make_oracle(labels: np.ndarray) -> Callable[[LevelGraph], EdgeScores]:
    return lambda g: oracle_scores(g, labels)


def _scorer_fn(scorer: Scorer):
    if isinstance(scorer, ScorerParams):
        return lambda g: score_graph(g, scorer)
    return scorer


def cluster_level(graph: LevelGraph, scores: EdgeScores, p_tau: float):
    """One clustering pass. Returns ``(assignment, merge_edges)``."""
    mask = candidate_set(graph, scores, p_tau)
    merges = select_merges(graph, mask, scores)
    return components(merges, graph.n), merges


def sharc_infer(
    es: EmbeddingSet,
    scorer: Scorer,
    k: int,
    p_tau: float,
    max_levels: int = DEFAULT_MAX_LEVELS,
    backend: Optional[SimilarityBackend] = None,
) -> Hierarchy:
    """Cluster one recording.

    Stops when a level has at most one node, when no merge edge is selected,
    or after ``max_levels`` clustering passes.
    """
    if max_levels < 1:
        raise ValueError(f"max_levels must be >= 1, got {max_levels}")
    score = _scorer_fn(scorer)
    graph = build_level0(es, k, backend)
    levels = []
    stopped = "max-levels"
    for _ in range(max_levels):
        if graph.n <= 1:
            levels.append((graph, np.zeros(graph.n, dtype=np.int64)))
            stopped = "single-node"
            break
        scores = score(graph)
        assign, merges = cluster_level(graph, scores, p_tau)
        levels.append((graph, assign))
        if len(merges) == 0:
            stopped = "no-merge"
            break
        graph = aggregate(graph, assign, scores.density, backend)
    logger.debug(
        "%s: %d levels, %d clusters (%s)", es.recording_id, len(levels), graph.n, stopped
    )

    labels = np.empty(es.n, dtype=np.int64)
    top = levels[-1][1] if stopped != "max-levels" else np.arange(graph.n)
    top_graph = levels[-1][0] if stopped != "max-levels" else graph
    for node, origin in enumerate(top_graph.node_origin):
        labels[origin] = top[node]
    return Hierarchy(tuple(levels), dense_relabel(labels), stopped)
