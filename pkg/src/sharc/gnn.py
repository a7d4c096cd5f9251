"""Graph scorer: one GraphSAGE layer followed by a pairwise feed-forward head.

Shapes follow numpy's row convention: node matrices are ``(n, width)``, so the
latent matrix returned by :func:`sage_forward` is ``(n, F')`` with one row
per node.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .core import Dims, EdgeScores, LevelGraph, SharcError


class ShapeError(SharcError, ValueError):
    pass


class CheckpointError(SharcError, ValueError):
    pass


PARAM_NAMES = ("sage_weight", "sage_bias", "w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class ScorerParams:
    sage_weight: np.ndarray  # (F', 4F)
    sage_bias: np.ndarray  # (F',)
    w1: np.ndarray  # (h1, 2F')
    b1: np.ndarray
    w2: np.ndarray  # (h2, h1)
    b2: np.ndarray
    w3: np.ndarray  # (2, h2); row 1 is the "linked" class
    b3: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            a = np.array(getattr(self, name), dtype=np.float64, copy=True)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        fp, four_f = self.sage_weight.shape
        h1, h2 = self.w1.shape[0], self.w2.shape[0]
        expected = {
            "sage_bias": (fp,),
            "w1": (h1, 2 * fp),
            "b1": (h1,),
            "w2": (h2, h1),
            "b2": (h2,),
            "w3": (2, h2),
            "b3": (2,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if four_f % 4:
            raise ShapeError(f"sage_weight width {four_f} is not a multiple of 4")

    @property
    def feature_dim(self) -> int:
        return self.sage_weight.shape[1] // 4

    @property
    def dims(self) -> Dims:
        return Dims(self.sage_weight.shape[0], self.w1.shape[0], self.w2.shape[0])

    @property
    def ffn_weights(self) -> tuple:
        return (self.w1, self.w2, self.w3)

    @property
    def ffn_biases(self) -> tuple:
        return (self.b1, self.b2, self.b3)

    def arrays(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def flatten(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    def unflatten(self, flat: np.ndarray) -> "ScorerParams":
        """New params of the same shapes filled from a flat vector."""
        out, pos = {}, 0
        for name in PARAM_NAMES:
            a = getattr(self, name)
            out[name] = np.asarray(flat[pos : pos + a.size]).reshape(a.shape)
            pos += a.size
        if pos != flat.size:
            raise ShapeError(f"flat vector has {flat.size} entries, expected {pos}")
        return ScorerParams(**out)

    @property
    def size(self) -> int:
        return sum(getattr(self, n).size for n in PARAM_NAMES)

    def is_finite(self) -> bool:
        return all(np.isfinite(getattr(self, n)).all() for n in PARAM_NAMES)


def init_params(
    feature_dim: int, dims: Dims = Dims(), seed: int = 0, bias_scale: float = 0.0
) -> ScorerParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases ~ U(-bias_scale, bias_scale).

    The default zero biases are the training start point. A nonzero
    ``bias_scale`` gives generic instances for gradient checking.
    """
    rng = np.random.default_rng(seed)
    fp, h1, h2 = dims.as_tuple()

    def uni(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    def bias(size):
        return rng.uniform(-bias_scale, bias_scale, size=size) if bias_scale else np.zeros(size)

    return ScorerParams(
        sage_weight=uni(fp, 4 * feature_dim),
        sage_bias=bias(fp),
        w1=uni(h1, 2 * fp),
        b1=bias(h1),
        w2=uni(h2, h1),
        b2=bias(h2),
        w3=uni(2, h2),
        b3=bias(2),
    )


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass, kept for backpropagation.

    ``latent`` is ``(n, F')``; ``aggregated_neighborhood`` is ``(n, 2F)``.
    Pair-head arrays are per edge in row-major ``(src, slot)`` order.
    """

    latent: np.ndarray
    aggregated_neighborhood: np.ndarray
    sage_pre: np.ndarray
    neighbor_weights: np.ndarray
    adjacency: sp.csr_matrix
    head_pre1: Optional[np.ndarray] = None
    head_pre2: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None
    scores: Optional[EdgeScores] = None


def neighbor_weights(graph: LevelGraph) -> np.ndarray:
    """Row-normalised edge similarities; uniform when a row sums to zero."""
    s = graph.edge_similarity
    if s.shape[1] == 0:
        return s.copy()
    tot = s.sum(axis=1, keepdims=True)
    uniform = np.full_like(s, 1.0 / s.shape[1])
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(tot > 0, s / np.where(tot > 0, tot, 1.0), uniform)
    return w


def _adjacency(graph: LevelGraph, weights: np.ndarray) -> sp.csr_matrix:
    n, deg = graph.neighbors.shape
    indptr = np.arange(0, n * deg + 1, deg) if deg else np.zeros(n + 1, dtype=np.int64)
    return sp.csr_matrix((weights.ravel(), graph.neighbors.ravel(), indptr), shape=(n, n))


def sage_forward(graph: LevelGraph, params: ScorerParams) -> ForwardTrace:
    """GraphSAGE layer: ``relu(W [h_i ; sum_j w_ij h_j] + b)``."""
    h = graph.node_features
    if h.shape[1] * 2 != params.sage_weight.shape[1]:
        raise ShapeError(
            f"node features of width {h.shape[1]} do not match a scorer for "
            f"F = {params.feature_dim}"
        )
    w = neighbor_weights(graph)
    adj = _adjacency(graph, w)
    neigh = np.asarray(adj @ h)
    pre = np.concatenate([h, neigh], axis=1) @ params.sage_weight.T + params.sage_bias
    return ForwardTrace(
        latent=np.maximum(pre, 0.0),
        aggregated_neighborhood=neigh,
        sage_pre=pre,
        neighbor_weights=w,
        adjacency=adj,
    )


def _pair_head(latent, src, dst, params):
    fp = latent.shape[1]
    u = latent @ params.w1[:, :fp].T
    v = latent @ params.w1[:, fp:].T
    pre1 = u[src] + v[dst] + params.b1
    pre2 = np.maximum(pre1, 0.0) @ params.w2.T + params.b2
    logits = np.maximum(pre2, 0.0) @ params.w3.T + params.b3
    p = expit(logits[:, 1] - logits[:, 0])
    return pre1, pre2, logits, p


def score_pairs(trace: ForwardTrace, edges, params: ScorerParams) -> EdgeScores:
    """Linkage probability of every directed edge.

    ``edges`` is either a LevelGraph (result shaped like its neighbour table)
    or an ``(E, 2)`` array of (src, dst) pairs (result is flat).
    """
    if isinstance(edges, LevelGraph):
        src, dst, shape = edges.src, edges.dst, edges.neighbors.shape
    else:
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src, dst, shape = e[:, 0], e[:, 1], (e.shape[0],)
    if params.w1.shape[1] != 2 * trace.latent.shape[1]:
        raise ShapeError("latent width does not match the feed-forward head")
    *_, p = _pair_head(trace.latent, src, dst, params)
    return EdgeScores(linkage_prob=p.reshape(shape))


def edge_weights(p) -> np.ndarray:
    return 2.0 * np.asarray(p, dtype=np.float64) - 1.0


def node_density(e_hat: np.ndarray, graph: LevelGraph) -> np.ndarray:
    """Mean of ``e_ij * S(i, j)`` over each node's out-edges (0 when isolated)."""
    e_hat = np.asarray(e_hat, dtype=np.float64).reshape(graph.neighbors.shape)
    if graph.degree == 0:
        return np.zeros(graph.n)
    return (e_hat * graph.edge_similarity).mean(axis=1)


def forward(graph: LevelGraph, params: ScorerParams) -> ForwardTrace:
    """Full scorer pass; the returned trace carries the complete EdgeScores."""
    trace = sage_forward(graph, params)
    pre1, pre2, logits, p = _pair_head(trace.latent, graph.src, graph.dst, params)
    p = p.reshape(graph.neighbors.shape)
    e_hat = edge_weights(p)
    trace.head_pre1, trace.head_pre2, trace.logits = pre1, pre2, logits
    trace.scores = EdgeScores(p, e_hat, node_density(e_hat, graph))
    return trace


def score_graph(graph: LevelGraph, params: ScorerParams) -> EdgeScores:
    return forward(graph, params).scores


# --- checkpoint container ---------------------------------------------------

CKPT_MAGIC = b"SHCK"
CKPT_VERSION = 1
_HEADER = struct.Struct("<4sIQQQQ")


def save_params(params: ScorerParams, path: Union[str, Path]) -> None:
    """Binary checkpoint: magic, version, (F, F', h1, h2), then f64 arrays."""
    fp, h1, h2 = params.dims.as_tuple()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, params.feature_dim, fp, h1, h2))
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def load_params(path: Union[str, Path]) -> ScorerParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short for checkpoint header")
    magic, version, f, fp, h1, h2 = _HEADER.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    shapes = {
        "sage_weight": (fp, 4 * f),
        "sage_bias": (fp,),
        "w1": (h1, 2 * fp),
        "b1": (h1,),
        "w2": (h2, h1),
        "b2": (h2,),
        "w3": (2, h2),
        "b3": (2,),
    }
    total = sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) != _HEADER.size + 8 * total:
        raise CheckpointError(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, expected {8 * total}"
        )
    flat = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    out, pos = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        out[name] = flat[pos : pos + size].reshape(shape)
        pos += size
    return ScorerParams(**out)
