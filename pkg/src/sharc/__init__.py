"""Supervised hierarchical graph clustering of speaker-segment embeddings."""

from .cluster import (
    candidate_set,
    components,
    make_oracle,
    oracle_scores,
    select_merges,
    sharc_infer,
)
from .core import (
    Dims,
    EdgeScores,
    EmbeddingSet,
    Hierarchy,
    LevelGraph,
    SharcError,
    ValidationError,
    validate,
)
from .gnn import (
    ScorerParams,
    edge_weights,
    init_params,
    load_params,
    node_density,
    save_params,
    sage_forward,
    score_pairs,
)
from .metrics import der, pairwise_f1
from .simgraph import aggregate, build_level0, knn_edges, similarity
from .train import TrainConfig, build_training_hierarchy, grad_check, grad_check_report, loss, train

__version__ = "0.1.0"
