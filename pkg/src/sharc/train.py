"""Supervised training of the scorer with hand-written reverse-mode gradients."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .cluster import cluster_level, oracle_scores
from .core import Dims, EdgeScores, EmbeddingSet, LevelGraph, SharcError
from .gnn import PARAM_NAMES, ForwardTrace, ScorerParams, forward, init_params
from .simgraph import SimilarityBackend, aggregate, build_level0

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12


class TrainingError(SharcError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class TrainGraph:
    """A level graph with its ground-truth edge labels ``q`` and densities."""

    graph: LevelGraph
    q: np.ndarray  # (n, deg) in {0, 1}
    density: np.ndarray  # (n,)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 500
    batch_size: int = 8
    k: int = 60
    seed: int = 0
    dims: Dims = field(default_factory=Dims)
    workers: int = 1
    # Random orthogonal rotation of each recording's embeddings per step.
    # Cosine similarities, kNN edges and targets are unchanged by it.
    augment_rotation: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    conn: float
    den: float


def build_training_hierarchy(
    es: EmbeddingSet, k: int, backend: Optional[SimilarityBackend] = None
) -> list:
    """Ground-truth graphs of every level for one labelled recording.

    Levels advance by clustering with the oracle scores and aggregating with
    the ground-truth densities, so every node stays label-pure.
    """
    if es.labels is None:
        raise TrainingError(f"{es.recording_id}: training needs labels")
    n_labels = np.unique(es.labels).size
    graph = build_level0(es, k, backend)
    out = []
    while True:
        truth = oracle_scores(graph, es.labels)
        out.append(TrainGraph(graph, truth.linkage_prob, truth.density))
        if graph.n <= n_labels:
            break
        assign, merges = cluster_level(graph, truth, 0.5)
        if len(merges) == 0:
            break
        graph = aggregate(graph, assign, truth.density, backend)
    return out


def loss(scores: EdgeScores, tg: TrainGraph) -> tuple:
    """``(L, L_conn, L_den)`` for one graph: edge BCE plus density MSE."""
    p = np.clip(np.asarray(scores.linkage_prob).ravel(), PROB_EPS, 1.0 - PROB_EPS)
    q = tg.q.ravel()
    if p.size:
        conn = float(-np.mean(q * np.log(p) + (1.0 - q) * np.log1p(-p)))
    else:
        conn = 0.0
    den = float(np.mean((tg.density - scores.density) ** 2)) if tg.density.size else 0.0
    return conn + den, conn, den


def batch_loss(values: Iterable[tuple]) -> tuple:
    """Mean of per-graph ``(L, L_conn, L_den)`` triples."""
    arr = np.array(list(values), dtype=np.float64).reshape(-1, 3)
    if arr.shape[0] == 0:
        return 0.0, 0.0, 0.0
    return tuple(float(v) for v in arr.mean(axis=0))


def edge_logit_grad(scores: EdgeScores, tg: TrainGraph) -> np.ndarray:
    """d L / d t for every edge, where ``t = logit_linked - logit_unlinked``.

    The density term reaches an edge through ``d_i``'s dependence on
    ``p_ij``: a factor ``2 S(i, j) / deg_i`` times the sigmoid slope.
    """
    g = tg.graph
    n, deg = g.neighbors.shape
    p = np.asarray(scores.linkage_prob).reshape(n, deg)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    g_t = np.where(inside, (p - tg.q) / max(n * deg, 1), 0.0)
    if deg:
        d_dens = -2.0 * (tg.density - scores.density) / n
        g_t = g_t + d_dens[:, None] * 2.0 * g.edge_similarity / deg * p * (1.0 - p)
    return g_t


def backward(
    trace: ForwardTrace, tg: TrainGraph, params: ScorerParams, input_grad: bool = False
):
    """Gradient of the single-graph loss with respect to every parameter.

    Returns a dict keyed like :data:`PARAM_NAMES`. With ``input_grad`` the
    gradient with respect to the node features (graph held fixed) is
    returned as a second value.
    """
    g = tg.graph
    n, deg = g.neighbors.shape
    n_edges = n * deg
    fp = params.sage_weight.shape[0]
    g_t = edge_logit_grad(trace.scores, tg).ravel()
    d_logits = np.stack([-g_t, g_t], axis=1)
    pre1, pre2 = trace.head_pre1, trace.head_pre2
    a1 = np.maximum(pre1, 0.0)
    a2 = np.maximum(pre2, 0.0)
    grads = {
        "w3": d_logits.T @ a2,
        "b3": d_logits.sum(axis=0),
    }
    d_pre2 = (d_logits @ params.w3) * (pre2 > 0)
    grads["w2"] = d_pre2.T @ a1
    grads["b2"] = d_pre2.sum(axis=0)
    d_pre1 = (d_pre2 @ params.w2) * (pre1 > 0)
    grads["b1"] = d_pre1.sum(axis=0)

    h1 = params.w1.shape[0]
    d_u = d_pre1.reshape(n, deg, h1).sum(axis=1)
    if n_edges:
        scatter = sp.csr_matrix(
            (np.ones(n_edges), (g.neighbors.ravel(), np.arange(n_edges))), shape=(n, n_edges)
        )
        d_v = np.asarray(scatter @ d_pre1)
    else:
        d_v = np.zeros((n, h1))
    latent = trace.latent
    grads["w1"] = np.concatenate([d_u.T @ latent, d_v.T @ latent], axis=1)
    d_latent = d_u @ params.w1[:, :fp] + d_v @ params.w1[:, fp:]

    d_pre = d_latent * (trace.sage_pre > 0)
    x = np.concatenate([g.node_features, trace.aggregated_neighborhood], axis=1)
    grads["sage_weight"] = d_pre.T @ x
    grads["sage_bias"] = d_pre.sum(axis=0)
    grads = {name: grads[name] for name in PARAM_NAMES}
    if not input_grad:
        return grads
    d_x = d_pre @ params.sage_weight
    width = g.node_features.shape[1]
    d_h = d_x[:, :width] + np.asarray(trace.adjacency.T @ d_x[:, width:])
    return grads, d_h


def loss_and_grad(tg: TrainGraph, params: ScorerParams):
    trace = forward(tg.graph, params)
    return loss(trace.scores, tg), backward(trace, tg, params)


def flatten_grads(grads: dict) -> np.ndarray:
    return np.concatenate([np.ravel(grads[n]) for n in PARAM_NAMES])


def random_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def rotate(tg: TrainGraph, rot: np.ndarray) -> TrainGraph:
    """Apply ``rot`` to both halves of every node feature."""
    g = tg.graph
    f = g.feature_dim
    h = g.node_features
    feats = np.concatenate([h[:, :f] @ rot, h[:, f:] @ rot], axis=1)
    return replace(tg, graph=replace(g, node_features=feats))


def _graph_value(tg: TrainGraph, params: ScorerParams) -> tuple:
    """Loss plus the ReLU activation pattern, to spot kink crossings."""
    trace = forward(tg.graph, params)
    pattern = np.concatenate(
        [np.ravel(trace.sage_pre > 0), np.ravel(trace.head_pre1 > 0), np.ravel(trace.head_pre2 > 0)]
    )
    return loss(trace.scores, tg)[0], pattern


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int  # coordinates whose +/- step changes a ReLU pattern


def grad_check_report(
    params: ScorerParams,
    graphs: Union[TrainGraph, Sequence[TrainGraph]],
    n_coords: int,
    step: float = 1e-5,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare :func:`backward` with central differences.

    ``n_coords`` parameter coordinates are sampled per graph. The relative
    error is ``|a - n| / max(|a|, |n|, abs_floor)``. A coordinate whose two
    probes see different ReLU patterns straddles a kink, where no finite
    difference approximates the derivative; it is skipped and counted.
    """
    if n_coords < 1:
        raise ValueError("n_coords must be >= 1")
    if isinstance(graphs, TrainGraph):
        graphs = [graphs]
    rng = np.random.default_rng(seed)
    flat = params.flatten()
    worst, checked, skipped = 0.0, 0, 0
    for tg in graphs:
        _, grads = loss_and_grad(tg, params)
        analytic = flatten_grads(grads)
        coords = rng.choice(flat.size, size=n_coords, replace=n_coords > flat.size)
        for c in coords:
            plus, minus = flat.copy(), flat.copy()
            plus[c] += step
            minus[c] -= step
            up, pat_up = _graph_value(tg, params.unflatten(plus))
            down, pat_down = _graph_value(tg, params.unflatten(minus))
            if not np.array_equal(pat_up, pat_down):
                skipped += 1
                continue
            numeric = (up - down) / (2.0 * step)
            a = analytic[c]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), abs_floor))
            checked += 1
    return GradCheckReport(worst, checked, skipped)


def grad_check(
    params: ScorerParams,
    graphs: Union[TrainGraph, Sequence[TrainGraph]],
    n_coords: int,
    step: float = 1e-5,
    seed: int = 0,
    abs_floor: float = 1e-8,
) -> float:
    """Largest relative error of :func:`grad_check_report`."""
    return grad_check_report(params, graphs, n_coords, step, seed, abs_floor).max_rel_error


def train(
    datasets: Sequence[EmbeddingSet],
    cfg: TrainConfig,
    params: Optional[ScorerParams] = None,
    backend: Optional[SimilarityBackend] = None,
    hierarchies: Optional[list] = None,
):
    """Plain SGD over batches of recordings.

    Each step averages the gradient over all graphs (every level of every
    recording) in the batch. Returns ``(params, history)`` where history has
    one :class:`EpochRecord` of pre-update losses per epoch.
    """
    if not datasets and hierarchies is None:
        raise TrainingError("no training data")
    if hierarchies is None:
        hierarchies = [build_training_hierarchy(es, cfg.k, backend) for es in datasets]
    hierarchies = [[tg for tg in h if tg.graph.n_edges] for h in hierarchies]
    if params is None:
        f = hierarchies[0][0].graph.feature_dim if hierarchies[0] else datasets[0].dim
        params = init_params(f, cfg.dims, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    flat = params.flatten()
    history = []
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(hierarchies))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                graphs = []
                for r in order[start : start + cfg.batch_size]:
                    if cfg.augment_rotation and hierarchies[r]:
                        rot = random_rotation(rng, hierarchies[r][0].graph.feature_dim)
                        graphs.extend(rotate(tg, rot) for tg in hierarchies[r])
                    else:
                        graphs.extend(hierarchies[r])
                if not graphs:
                    continue
                current = params
                if pool is None:
                    results = [loss_and_grad(tg, current) for tg in graphs]
                else:
                    results = list(pool.map(lambda tg: loss_and_grad(tg, current), graphs))
                total = np.zeros_like(flat)
                for values, grads in results:
                    losses.append(values)
                    total += flatten_grads(grads)
                flat = flat - cfg.learning_rate * (total / len(graphs))
                params = params.unflatten(flat)
            rec = EpochRecord(epoch, *batch_loss(losses))
            history.append(rec)
            if not (np.isfinite(rec.loss) and np.isfinite(flat).all()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}: L={rec.loss}, "
                    f"L_conn={rec.conn}, L_den={rec.den}"
                )
            logger.info("epoch %d  L=%.5f  conn=%.5f  den=%.5f", epoch, rec.loss, rec.conn, rec.den)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, history
