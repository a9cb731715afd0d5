"""Bags of instances and their conversion to graphs.

A bag is an ordered set of instance feature vectors with one label.
Each bag is turned into an undirected graph whose binary adjacency comes
either from feature similarity (cosine similarity above a threshold) or
from 8-connectivity of patch grid coordinates. The diagonal is always
forced to 1 so every node keeps its own feature in aggregation and
degrees never vanish.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .linalg import Matrix, Vector


class DegenerateInputError(ValueError):
    """Input is numerically unusable (e.g. a zero-norm feature vector)."""


class ContractError(ValueError):
    """A precondition on the data model was violated."""


@dataclass(frozen=True)
class Instance:
    """One feature vector, optionally pinned to a patch-grid coordinate."""

    features: np.ndarray
    grid_pos: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 1:
            raise ContractError(f"instance features must be 1-D, got shape {f.shape}")
        object.__setattr__(self, "features", f)
        if self.grid_pos is not None:
            r, c = self.grid_pos
            object.__setattr__(self, "grid_pos", (int(r), int(c)))


@dataclass(frozen=True)
class Bag:
    """A labeled, ordered collection of instances; the unit of prediction."""

    id: str
    label: int
    instances: Tuple[Instance, ...]

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if not self.instances:
            raise ContractError(f"bag {self.id!r} has no instances")
        dims = {inst.features.shape[0] for inst in self.instances}
        if len(dims) != 1:
            raise ContractError(f"bag {self.id!r} mixes feature dims {sorted(dims)}")
        gridded = [inst.grid_pos is not None for inst in self.instances]
        if any(gridded) and not all(gridded):
            raise ContractError(f"bag {self.id!r} mixes gridded and non-gridded instances")
        if all(gridded):
            positions = [inst.grid_pos for inst in self.instances]
            if len(set(positions)) != len(positions):
                raise ContractError(f"bag {self.id!r} has duplicate grid positions")

    @property
    def size(self) -> int:
        return len(self.instances)

    @property
    def feature_dim(self) -> int:
        return self.instances[0].features.shape[0]

    @property
    def has_grid(self) -> bool:
        return self.instances[0].grid_pos is not None

    def feature_matrix(self) -> Matrix:
        """K x F matrix of instance features, in bag order."""
        return np.stack([inst.features for inst in self.instances])


@dataclass(frozen=True)
class BagGraph:
    """Binary adjacency (with self-loops) and per-node degrees for one bag."""

    adjacency: Matrix
    degrees: Vector

    @property
    def size(self) -> int:
        return self.adjacency.shape[0]


def _finalize(adjacency: np.ndarray) -> BagGraph:
    np.fill_diagonal(adjacency, 1.0)
    degrees = adjacency.sum(axis=1)
    return BagGraph(adjacency=adjacency, degrees=degrees)


def cosine_similarity(a: Vector, b: Vector) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.dot(a, b) / (na * nb))


def build_similarity_graph(bag: Bag, threshold: float = 0.5) -> BagGraph:
    """Connect instances whose cosine similarity exceeds ``threshold``."""
    feats = bag.feature_matrix()
    norms = np.linalg.norm(feats, axis=1)
    bad = np.nonzero(norms == 0.0)[0]
    if bad.size:
        raise DegenerateInputError(
            f"bag {bag.id!r}: zero-norm features at instance {int(bad[0])}"
        )
    sims = (feats / norms[:, None]) @ (feats / norms[:, None]).T
    adjacency = (sims > threshold).astype(np.float64)
    return _finalize(adjacency)


def build_spatial_graph(bag: Bag) -> BagGraph:
    """Connect patches within Chebyshev distance 1 on the grid (8-connectivity)."""
    if not bag.has_grid:
        raise ContractError(f"bag {bag.id!r} has no grid positions")
    pos = np.array([inst.grid_pos for inst in bag.instances], dtype=np.int64)
    dr = np.abs(pos[:, 0][:, None] - pos[:, 0][None, :])
    dc = np.abs(pos[:, 1][:, None] - pos[:, 1][None, :])
    adjacency = ((dr <= 1) & (dc <= 1)).astype(np.float64)
    return _finalize(adjacency)


def build_self_graph(size: int) -> BagGraph:
    """Identity adjacency: every node sees only itself (ablation baseline)."""
    return BagGraph(adjacency=np.eye(size), degrees=np.ones(size))


def neighbors(graph: BagGraph, k: int) -> list[int]:
    """Sorted neighbor indices of node k, self included."""
    if not 0 <= k < graph.size:
        raise IndexError(f"node {k} out of range for graph of size {graph.size}")
    return [int(j) for j in np.nonzero(graph.adjacency[k] == 1.0)[0]]


class GraphMode(str, Enum):
    SIMILARITY = "similarity"
    SPATIAL = "spatial"
    NONE = "none"


@dataclass(frozen=True)
class GraphConfig:
    """How bags become graphs; mode ``none`` yields self-loop-only graphs."""

    mode: GraphMode = GraphMode.SIMILARITY
    threshold: float = 0.5

    def build(self, bag: Bag) -> BagGraph:
        if self.mode == GraphMode.SIMILARITY:
            return build_similarity_graph(bag, self.threshold)
        if self.mode == GraphMode.SPATIAL:
            return build_spatial_graph(bag)
        return build_self_graph(bag.size)
