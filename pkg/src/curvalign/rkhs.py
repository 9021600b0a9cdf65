"""Kernel functions, RKHS distances and the kernelized curvature score.

Edge vectors are kernelized directly: the feature map is never
materialized, every quantity is expressed through k(., .).  With the linear
kernel everything here reduces exactly to the Euclidean machinery in
``geometry``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateEdgeError, ShapeMismatchError
from .geometry import (
    EDGE_FLOOR,
    EdgeBundle,
    NeighborGraph,
    knn_from_sq_distances,
    sq_distance_matrix,
)

_KINDS = ("linear", "rbf")


@dataclass(frozen=True)
class KernelSpec:
    """Choice of kernel; gamma=None on an rbf spec means "median heuristic
    at the point of use"."""

    kind: str
    gamma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"kernel kind must be one of {_KINDS}, got {self.kind!r}")
        if self.gamma is not None and not self.gamma > 0.0:
            raise ValueError("gamma must be positive")


@dataclass
class GramMatrix:
    values: np.ndarray  # (k, k)
    normalized: bool


def median_heuristic_gamma(points: np.ndarray) -> float:
    """gamma = 1 / (2 * median(pairwise distance)^2) over the batch.

    Falls back to 1.0 when the points are (numerically) all identical.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        return 1.0
    dist = np.sqrt(sq_distance_matrix(points))
    iu = np.triu_indices(n, 1)
    med = float(np.median(dist[iu]))
    if med <= EDGE_FLOOR:
        return 1.0
    return 1.0 / (2.0 * med * med)


def resolve_spec(spec: KernelSpec, points: np.ndarray) -> KernelSpec:
    """Fill in the rbf bandwidth from the batch when left unspecified."""
    if spec.kind == "rbf" and spec.gamma is None:
        return KernelSpec("rbf", median_heuristic_gamma(points))
    return spec


def kernel_eval(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError(f"kernel_eval: {a.shape} vs {b.shape}")
    if spec.kind == "linear":
        return float(a @ b)
    d = a - b
    return float(np.exp(-_gamma(spec) * (d @ d)))


def _gamma(spec: KernelSpec) -> float:
    if spec.gamma is None:
        raise ValueError("rbf spec has no bandwidth; resolve it against a batch first")
    return spec.gamma


def rkhs_distance(spec: KernelSpec, a: np.ndarray, b: np.ndarray) -> float:
    """Distance between the images of a and b in the kernel's feature space."""
    radicand = kernel_eval(spec, a, a) - 2.0 * kernel_eval(spec, a, b) + kernel_eval(spec, b, b)
    return float(np.sqrt(max(radicand, 0.0)))


def _rkhs_sq_distances(points: np.ndarray, spec: KernelSpec) -> np.ndarray:
    if spec.kind == "linear":
        return sq_distance_matrix(points)
    d2 = 2.0 - 2.0 * np.exp(-_gamma(spec) * sq_distance_matrix(points))
    return np.maximum(d2, 0.0)


def knn_rkhs(points: np.ndarray, k: int, spec: KernelSpec) -> NeighborGraph:
    """Brute-force kNN under the RKHS distance; same tie rule as knn_euclidean."""
    points = np.asarray(points, dtype=np.float64)
    spec = resolve_spec(spec, points)
    d2 = _rkhs_sq_distances(points, spec)
    return knn_from_sq_distances(d2, k, source=f"rkhs:{spec.kind}")


def normalized_gram(edges: np.ndarray, spec: KernelSpec) -> GramMatrix:
    """Kernel matrix of the edges rescaled to unit diagonal.

    For the kernels in scope all entries land in [-1, 1]; the diagonal is
    exactly 1.  A linear kernel with a zero edge has a zero self-kernel and
    raises DegenerateEdgeError.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if spec.kind == "linear":
        gram = edges @ edges.T
        diag = np.diag(gram).copy()
        if np.min(diag) <= EDGE_FLOOR ** 2:
            bad = int(np.argmin(diag))
            raise DegenerateEdgeError(f"edge {bad} has zero self-kernel")
        values = gram / np.sqrt(diag[:, None] * diag[None, :])
    else:
        diff = edges[:, None, :] - edges[None, :, :]
        values = np.exp(-_gamma(spec) * np.sum(diff * diff, axis=2))
    return GramMatrix(values=values, normalized=True)


def kernel_curvature_score(bundle: EdgeBundle, spec: KernelSpec) -> float:
    """Sum of the strict upper triangle of the normalized edge kernel matrix."""
    edges = np.asarray(bundle.edges, dtype=np.float64)
    k = edges.shape[0]
    if k < 2:
        raise ValueError("curvature needs at least two edges")
    gram = normalized_gram(edges, spec)
    a, b = np.triu_indices(k, 1)
    return float(np.sum(gram.values[a, b]))
