"""K-nearest-neighbour graphs, neighbourhood gathering and edge encodings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .numerics import Linear, Tensor, concat, gather, unsqueeze
from .numerics.tensor import broadcast_to

_ROW_CHUNK = 512


@dataclass
class PointCloud:
    coords: np.ndarray
    attributes: Optional[np.ndarray] = None
    point_labels: Optional[np.ndarray] = None
    shape_label: Optional[int] = None
    category: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or len(self.coords) < 1:
            raise ValueError(f"coords must be (N>=1, 3), got {self.coords.shape}")
        n = len(self.coords)
        if self.attributes is not None:
            self.attributes = np.asarray(self.attributes, dtype=np.float64)
            if self.attributes.ndim != 2 or len(self.attributes) != n:
                raise ValueError("attributes must be (N, A)")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (n,):
                raise ValueError("point_labels must have one entry per point")

    @property
    def n(self) -> int:
        return len(self.coords)

    def features(self) -> np.ndarray:
        """Per-point input channels: xyz followed by any attributes."""
        if self.attributes is None:
            return self.coords
        return np.concatenate([self.coords, self.attributes], axis=1)

    def take(self, idx: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.coords[idx],
            None if self.attributes is None else self.attributes[idx],
            None if self.point_labels is None else self.point_labels[idx],
            self.shape_label, self.category, self.name,
        )


@dataclass
class NeighborGraph:
    indices: np.ndarray
    k: int
    space: Literal["coordinate", "feature"] = "coordinate"

    @property
    def n(self) -> int:
        return self.indices.shape[0]


@dataclass
class EdgeFeatures:
    values: Tensor
    encoding_kind: Literal["absolute", "relative"] = field(default="relative")


def pairwise_sq_dist(rows: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, accumulated one coordinate at a time.

    Summing differences (rather than expanding ``|a|^2 + |b|^2 - 2ab``) keeps
    coincident points at exactly zero and integer grids exact.
    """
    d = np.zeros((rows.shape[0], basis.shape[0]), dtype=np.float64)
    for m in range(basis.shape[1]):
        diff = rows[:, m, None] - basis[None, :, m]
        d += diff * diff
    return d


def knn_build(basis, k: int, space: str = "coordinate") -> NeighborGraph:
    """Exact K-NN over the rows of ``basis`` (N x M).

    Each row is ordered by nondecreasing squared distance, ties broken by
    ascending index, so a point with no duplicate is its own first neighbour.
    """
    basis = np.asarray(basis, dtype=np.float64)
    if basis.ndim != 2:
        raise ValueError(f"basis must be 2-D, got shape {basis.shape}")
    n = basis.shape[0]
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"K={k} exceeds the number of points N={n}")
    if not np.isfinite(basis).all():
        raise ValueError("basis contains non-finite values")
    out = np.empty((n, k), dtype=np.int64)
    for start in range(0, n, _ROW_CHUNK):
        stop = min(start + _ROW_CHUNK, n)
        d = pairwise_sq_dist(basis[start:stop], basis)
        out[start:stop] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return NeighborGraph(out, k, space)


def knn_build_batch(basis: np.ndarray, k: int, space: str = "coordinate") -> np.ndarray:
    """Independent graphs per cloud; ``basis`` is (B, N, M), result (B, N, K)."""
    return np.stack([knn_build(b, k, space).indices for b in basis])


def gather_neighbors(features: Tensor, graph) -> Tensor:
    """(B, N, C) features and (B, N, K) indices (or a single NeighborGraph when
    B == 1) to (B, N, K, C) neighbourhood features."""
    idx = graph.indices if isinstance(graph, NeighborGraph) else np.asarray(graph)
    if idx.ndim == 2:
        idx = idx[None]
    if idx.shape[:2] != features.shape[:2]:
        raise ValueError(f"graph {idx.shape} does not match features {features.shape}")
    return gather(features, idx)


def edge_encode_absolute(f_neighbor: Tensor, weights: Linear) -> EdgeFeatures:
    """e_ij = w . f_j, the same shared map at every (i, j)."""
    if f_neighbor.shape[-1] != weights.in_dim:
        raise ValueError(f"edge weights expect {weights.in_dim} channels, got {f_neighbor.shape[-1]}")
    return EdgeFeatures(weights(f_neighbor), "absolute")


def edge_encode_relative(f_in: Tensor, f_neighbor: Tensor, weights: Linear) -> EdgeFeatures:
    """e_ij = w . concat(f_j - f_i, f_i)."""
    c = f_in.shape[-1]
    if f_neighbor.shape[-1] != c or weights.in_dim != 2 * c:
        raise ValueError(f"relative encoding needs 2*{c} input channels, got {weights.in_dim}")
    centre = broadcast_to(unsqueeze(f_in, -2), f_neighbor.shape)
    return EdgeFeatures(weights(concat([f_neighbor - centre, centre], axis=-1)), "relative")
