"""Graph-based multi-instance learning.

Bags of instances become graphs (feature-similarity or spatial patch
adjacency), are embedded with degree-normalized graph convolutions,
pooled by a graph-attention mechanism, and classified end-to-end with
hand-derived gradients.
"""

from .bags import (Bag, BagGraph, GraphConfig, GraphMode, Instance,
                   build_self_graph, build_similarity_graph,
                   build_spatial_graph, cosine_similarity, neighbors)
from .data import (DatasetManifest, SyntheticSpec, generate_synthetic,
                   load_bag_csv, load_gridded_csv, write_bag_csv)
from .model import (ForwardTrace, ModelConfig, ModelParams, backward, forward,
                    graph_attention_pool, graph_conv, init_params,
                    load_checkpoint, save_checkpoint,
                    score_is_permutation_invariant)
from .train import (AdamState, FoldReport, TrainConfig, adam_step, bce_loss,
                    ce_loss, cross_validate, metrics, train_one)

__version__ = "0.1.0"
