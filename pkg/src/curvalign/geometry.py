"""Exact k-nearest-neighbor search and discrete curvature scores.

A point is treated as the apex of a small polyhedron spanned by its k
nearest neighbors.  Translating the neighbors to the origin and projecting
them onto the unit sphere, the curvature score is the sum of cosine
similarities over all neighbor pairs; nearly colinear neighborhoods score
high, spread-out ones score low or negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEdgeError, KTooLargeError
from .numerics import Var

EDGE_FLOOR = 1e-12


@dataclass
class NeighborGraph:
    """Per-row neighbor indices, sorted by ascending distance then index."""

    indices: np.ndarray  # (b, k) int64
    source: str = "batch"

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        b, _ = self.indices.shape
        rows = np.arange(b)[:, None]
        if np.any(self.indices == rows):
            raise ValueError("neighbor list contains the point itself")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= b):
            raise ValueError("neighbor index out of range")


@dataclass
class EdgeBundle:
    """A center point and the edge vectors to its neighbors (rows)."""

    center: np.ndarray   # (d,)
    edges: np.ndarray    # (k, d), row a is neighbor_a - center


def knn_from_sq_distances(d2: np.ndarray, k: int, source: str) -> NeighborGraph:
    """Exact kNN given a full squared-distance matrix.

    Self-distances are ignored; ties are broken by ascending point index.
    """
    b = d2.shape[0]
    if not 1 <= k <= b - 1:
        raise KTooLargeError(f"k={k} requires 1 <= k <= b-1 with b={b}")
    d2 = d2.copy()
    np.fill_diagonal(d2, np.inf)
    indices = np.empty((b, k), dtype=np.int64)
    ids = np.arange(b)
    for i in range(b):
        order = np.lexsort((ids, d2[i]))
        indices[i] = order[:k]
    return NeighborGraph(indices, source=source)


def sq_distance_matrix(points: np.ndarray) -> np.ndarray:
    """All pairwise squared Euclidean distances, O(b^2) memory.

    The gram expansion keeps bit-identical rows at exactly 0, so duplicate
    tie-breaking stays deterministic; tiny negative values are clamped.
    """
    points = np.asarray(points, dtype=np.float64)
    gram = points @ points.T
    diag = np.diag(gram)
    return np.maximum(diag[:, None] + diag[None, :] - 2.0 * gram, 0.0)


def knn_euclidean(points: np.ndarray, k: int, source: str = "batch") -> NeighborGraph:
    """Brute-force Euclidean kNN over the rows of ``points``."""
    return knn_from_sq_distances(sq_distance_matrix(points), k, source)


def edge_bundle(points: np.ndarray, neighbors: NeighborGraph, row: int) -> EdgeBundle:
    points = np.asarray(points, dtype=np.float64)
    center = points[row]
    return EdgeBundle(center=center, edges=points[neighbors.indices[row]] - center)


def curvature_score(bundle: EdgeBundle) -> float:
    """Sum of pairwise cosine similarities between the bundle's edges.

    Bounded by k(k-1)/2 in absolute value.  Raises DegenerateEdgeError when
    an edge is shorter than EDGE_FLOOR (a zero edge has no direction).
    """
    edges = np.asarray(bundle.edges, dtype=np.float64)
    k = edges.shape[0]
    if k < 2:
        raise ValueError("curvature needs at least two edges")
    norms = np.sqrt(np.sum(edges * edges, axis=1))
    if np.min(norms) <= EDGE_FLOOR:
        bad = int(np.argmin(norms))
        raise DegenerateEdgeError(f"edge {bad} has norm <= {EDGE_FLOOR}")
    unit = edges / norms[:, None]
    gram = unit @ unit.T
    a, b = np.triu_indices(k, 1)
    return float(np.sum(gram[a, b]))


def batch_curvature(points: np.ndarray, k: int, metric="euclidean") -> np.ndarray:
    """Curvature score of every row against its k nearest neighbors.

    ``metric`` is either the string "euclidean" or a KernelSpec; the kernel
    branch finds neighbors by RKHS distance and scores with the normalized
    kernel.  Plain (non-differentiable) evaluation; the trainer uses
    curvature_scores_graph instead.
    """
    points = np.asarray(points, dtype=np.float64)
    if metric == "euclidean":
        neighbors = knn_euclidean(points, k)
        scores = [
            curvature_score(edge_bundle(points, neighbors, i))
            for i in range(points.shape[0])
        ]
    else:
        from . import rkhs  # local import; rkhs depends on this module

        spec = rkhs.resolve_spec(metric, points)
        neighbors = rkhs.knn_rkhs(points, k, spec)
        scores = []
        for i in range(points.shape[0]):
            try:
                scores.append(
                    rkhs.kernel_curvature_score(edge_bundle(points, neighbors, i), spec)
                )
            except DegenerateEdgeError as err:
                raise DegenerateEdgeError(f"row {i}: {err}") from None
    return np.asarray(scores, dtype=np.float64)


# ---------------------------------------------------------------------------
# differentiable batch curvature
# ---------------------------------------------------------------------------

_PAIR_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}


def _pair_machinery(b: int, k: int):
    """Index arrays for all within-row edge pairs plus the per-row summing matrix.

    left/right index into the (b*k, d) stacked edge matrix; S is (b, b*P)
    with S @ per-pair-values = per-row sums, P = k(k-1)/2.
    """
    key = (b, k)
    cached = _PAIR_CACHE.get(key)
    if cached is not None:
        return cached
    a_idx, b_idx = np.triu_indices(k, 1)
    p = a_idx.size
    offsets = (np.arange(b) * k)[:, None]
    left = (offsets + a_idx[None, :]).reshape(-1)
    right = (offsets + b_idx[None, :]).reshape(-1)
    summing = np.zeros((b, b * p))
    rows = np.repeat(np.arange(b), p)
    summing[rows, np.arange(b * p)] = 1.0
    _PAIR_CACHE[key] = (left, right, summing)
    return _PAIR_CACHE[key]


def curvature_scores_graph(z: Var, neighbors: NeighborGraph, metric="euclidean") -> Var:
    """Build the curvature score vector (shape (b, 1)) on z's graph.

    Neighbor selection is fixed; gradients flow through the center and the
    selected neighbor coordinates only.  ``metric`` must be "euclidean" or a
    KernelSpec with a concrete bandwidth.
    """
    b, k = neighbors.indices.shape
    d = z.shape[1]
    g = z.graph
    flat_nb = neighbors.indices.reshape(-1)
    centers = np.repeat(np.arange(b), k)
    edges = z.gather_rows(flat_nb) - z.gather_rows(centers)  # (b*k, d)
    left, right, summing = _pair_machinery(b, k)
    ones_col = g.leaf(np.ones((d, 1)))
    s_var = g.leaf(summing)

    kind = "euclidean" if metric == "euclidean" else metric.kind
    if kind in ("euclidean", "linear"):
        sq_norms = edges.square() @ ones_col          # (b*k, 1)
        if np.min(sq_norms.value) <= EDGE_FLOOR ** 2:
            bad = int(np.argmin(sq_norms.value))
            raise DegenerateEdgeError(
                f"row {bad // k}: edge to neighbor {bad % k} has norm <= {EDGE_FLOOR}"
            )
        norms = sq_norms.sqrt()
        unit = edges / (norms @ g.leaf(np.ones((1, d))))
        dots = (unit.gather_rows(left) * unit.gather_rows(right)) @ ones_col
        return s_var @ dots
    if kind == "rbf":
        if metric.gamma is None:
            raise ValueError("rbf metric must be resolved to a concrete gamma")
        diff = edges.gather_rows(left) - edges.gather_rows(right)
        sq_dist = diff.square() @ ones_col
        return s_var @ (sq_dist * (-metric.gamma)).exp()
    raise ValueError(f"unknown metric {metric!r}")
